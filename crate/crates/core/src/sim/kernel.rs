//! Single-writer simulation kernel.
//!
//! One thread owns the [`Simulation`]. Everything else talks to it through a
//! cloneable [`SimHandle`]: capability requests are queued and applied
//! between ticks, and reads go through immutable [`AvStatus`] snapshots.
//!
//! In [`Pacing::RealTime`] the kernel ticks against the wall clock. In
//! [`Pacing::Lockstep`] it only ticks when asked, which makes scripted runs
//! deterministic and much faster than real time.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::vehicle::{AvStatus, Simulation, TrajectorySample};
use super::{Capability, CapabilityError, Payload, SimError};
use crate::dsl::ParameterSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    RealTime,
    Lockstep,
}

#[derive(Debug, Clone)]
pub struct KernelOptions {
    pub pacing: Pacing,
    /// Telemetry period in simulated seconds.
    pub telemetry_period: f64,
    /// Keep every tick's state for later inspection.
    pub record_trajectory: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            pacing: Pacing::RealTime,
            telemetry_period: 0.1,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("simulation unavailable: {0}")]
pub struct SimUnavailable(pub String);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error(transparent)]
    Unavailable(#[from] SimUnavailable),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("manual stepping requires a lockstep kernel")]
    NotLockstep,
}

type Reply<T> = Sender<T>;

enum Request {
    Apply {
        capability: Capability,
        args: ParameterSet,
        reply: Reply<Result<Payload, CapabilityError>>,
    },
    Advance {
        ticks: u64,
        reply: Reply<Result<(), KernelError>>,
    },
    RunUntil {
        t: f64,
        reply: Reply<Result<(), KernelError>>,
    },
    Snapshot(Reply<AvStatus>),
    StateHash(Reply<u64>),
    Trajectory(Reply<Vec<TrajectorySample>>),
    Inspect(Box<dyn FnOnce(&Simulation) + Send>),
    Shutdown,
}

struct Shared {
    latest: Mutex<AvStatus>,
    alive: AtomicBool,
    subscribers: Mutex<Vec<Sender<AvStatus>>>,
    fault: Mutex<Option<SimError>>,
}

/// Cloneable handle to a running kernel.
#[derive(Clone)]
pub struct SimHandle {
    tx: Sender<Request>,
    shared: Arc<Shared>,
    pacing: Pacing,
    dt: f64,
}

impl SimHandle {
    pub fn spawn(sim: Simulation, options: KernelOptions) -> SimHandle {
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            latest: Mutex::new(sim.snapshot()),
            alive: AtomicBool::new(true),
            subscribers: Mutex::new(Vec::new()),
            fault: Mutex::new(None),
        });
        let dt = sim.dt();
        let pacing = options.pacing;
        let kernel = Kernel::new(sim, options, shared.clone());
        thread::Builder::new()
            .name("sim-kernel".into())
            .spawn(move || kernel.run(rx))
            .expect("spawn simulation kernel");
        SimHandle { tx, shared, pacing, dt }
    }

    pub fn pacing(&self) -> Pacing {
        self.pacing
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn is_running(&self) -> bool {
        self.shared.alive.load(Ordering::SeqCst) && self.shared.fault.lock().unwrap().is_none()
    }

    fn request<T>(&self, make: impl FnOnce(Reply<T>) -> Request) -> Result<T, SimUnavailable> {
        if let Some(fault) = self.shared.fault.lock().unwrap().clone() {
            return Err(SimUnavailable(format!("kernel halted: {fault}")));
        }
        let (reply, rx) = mpsc::channel();
        self.tx
            .send(make(reply))
            .map_err(|_| SimUnavailable("kernel stopped".into()))?;
        rx.recv().map_err(|_| SimUnavailable("kernel stopped".into()))
    }

    /// Queues a capability and blocks until the kernel applied it at the
    /// next tick boundary.
    pub fn apply(
        &self,
        capability: Capability,
        args: ParameterSet,
    ) -> Result<Result<Payload, CapabilityError>, SimUnavailable> {
        self.request(|reply| Request::Apply { capability, args, reply })
    }

    /// Runs `ticks` steps. Lockstep only.
    pub fn advance(&self, ticks: u64) -> Result<(), KernelError> {
        if self.pacing != Pacing::Lockstep {
            return Err(KernelError::NotLockstep);
        }
        self.request(|reply| Request::Advance { ticks, reply })?
    }

    /// Steps until simulated time reaches `t`. Lockstep only.
    pub fn run_until(&self, t: f64) -> Result<(), KernelError> {
        if self.pacing != Pacing::Lockstep {
            return Err(KernelError::NotLockstep);
        }
        self.request(|reply| Request::RunUntil { t, reply })?
    }

    /// Exact snapshot taken by the kernel thread.
    pub fn snapshot(&self) -> Result<AvStatus, SimUnavailable> {
        self.request(Request::Snapshot)
    }

    /// Most recently published snapshot; never blocks on the kernel.
    pub fn latest(&self) -> AvStatus {
        self.shared.latest.lock().unwrap().clone()
    }

    pub fn state_hash(&self) -> Result<u64, SimUnavailable> {
        self.request(Request::StateHash)
    }

    pub fn trajectory(&self) -> Result<Vec<TrajectorySample>, SimUnavailable> {
        self.request(Request::Trajectory)
    }

    /// Runs `f` on the kernel thread against the live simulation.
    pub fn inspect<T: Send + 'static>(
        &self,
        f: impl FnOnce(&Simulation) -> T + Send + 'static,
    ) -> Result<T, SimUnavailable> {
        let (tx, rx) = mpsc::channel();
        self.tx
            .send(Request::Inspect(Box::new(move |sim| {
                let _ = tx.send(f(sim));
            })))
            .map_err(|_| SimUnavailable("kernel stopped".into()))?;
        rx.recv().map_err(|_| SimUnavailable("kernel stopped".into()))
    }

    /// Telemetry feed: one snapshot per telemetry period of simulated time.
    pub fn subscribe(&self) -> Receiver<AvStatus> {
        let (tx, rx) = mpsc::channel();
        self.shared.subscribers.lock().unwrap().push(tx);
        rx
    }

    pub fn fault(&self) -> Option<SimError> {
        self.shared.fault.lock().unwrap().clone()
    }

    pub fn shutdown(&self) {
        let _ = self.tx.send(Request::Shutdown);
    }
}

struct Kernel {
    sim: Simulation,
    options: KernelOptions,
    shared: Arc<Shared>,
    trajectory: Vec<TrajectorySample>,
    telemetry_every: u64,
}

impl Kernel {
    fn new(sim: Simulation, options: KernelOptions, shared: Arc<Shared>) -> Kernel {
        let telemetry_every = ((options.telemetry_period / sim.dt()).round() as u64).max(1);
        let trajectory = if options.record_trajectory { vec![sim.sample()] } else { Vec::new() };
        Kernel {
            sim,
            options,
            shared,
            trajectory,
            telemetry_every,
        }
    }

    fn run(mut self, rx: Receiver<Request>) {
        let tick_period = Duration::from_secs_f64(self.sim.dt());
        let mut deadline = Instant::now() + tick_period;
        loop {
            let msg = match self.options.pacing {
                Pacing::Lockstep => match rx.recv() {
                    Ok(m) => Some(m),
                    Err(_) => break,
                },
                Pacing::RealTime => {
                    let now = Instant::now();
                    if now >= deadline {
                        if self.faulted() {
                            deadline = now + tick_period;
                        } else {
                            let _ = self.step();
                            deadline += tick_period;
                            // Do not try to catch up after a long stall.
                            if deadline + tick_period * 5 < now {
                                deadline = now + tick_period;
                            }
                        }
                        continue;
                    }
                    match rx.recv_timeout(deadline - now) {
                        Ok(m) => Some(m),
                        Err(RecvTimeoutError::Timeout) => None,
                        Err(RecvTimeoutError::Disconnected) => break,
                    }
                }
            };
            let Some(msg) = msg else { continue };
            if !self.handle(msg) {
                break;
            }
        }
        self.shared.alive.store(false, Ordering::SeqCst);
    }

    fn faulted(&self) -> bool {
        self.shared.fault.lock().unwrap().is_some()
    }

    /// Returns false on shutdown.
    fn handle(&mut self, msg: Request) -> bool {
        match msg {
            Request::Apply { capability, args, reply } => {
                let result = self.sim.apply(capability, &args);
                self.publish_latest();
                let _ = reply.send(result);
            }
            Request::Advance { ticks, reply } => {
                let mut result = Ok(());
                for _ in 0..ticks {
                    if let Err(e) = self.step() {
                        result = Err(e);
                        break;
                    }
                }
                let _ = reply.send(result);
            }
            Request::RunUntil { t, reply } => {
                let mut result = Ok(());
                // Half a step of slack so that `t` lands on the nearest tick.
                while self.sim.state().t + 0.5 * self.sim.dt() < t {
                    if let Err(e) = self.step() {
                        result = Err(e);
                        break;
                    }
                }
                let _ = reply.send(result);
            }
            Request::Snapshot(reply) => {
                let _ = reply.send(self.sim.snapshot());
            }
            Request::StateHash(reply) => {
                let _ = reply.send(self.sim.state_hash());
            }
            Request::Trajectory(reply) => {
                let _ = reply.send(self.trajectory.clone());
            }
            Request::Inspect(f) => f(&self.sim),
            Request::Shutdown => return false,
        }
        true
    }

    fn step(&mut self) -> Result<(), KernelError> {
        if let Some(fault) = self.shared.fault.lock().unwrap().clone() {
            return Err(KernelError::Sim(fault));
        }
        if let Err(e) = self.sim.tick() {
            tracing::error!(error = %e, "simulation halted");
            *self.shared.fault.lock().unwrap() = Some(e.clone());
            return Err(KernelError::Sim(e));
        }
        if self.options.record_trajectory {
            self.trajectory.push(self.sim.sample());
        }
        if self.sim.state().tick.is_multiple_of(self.telemetry_every) {
            let snap = self.sim.snapshot();
            self.shared.subscribers.lock().unwrap().retain(|s| s.send(snap.clone()).is_ok());
            *self.shared.latest.lock().unwrap() = snap;
        }
        Ok(())
    }

    fn publish_latest(&self) {
        *self.shared.latest.lock().unwrap() = self.sim.snapshot();
    }
}
