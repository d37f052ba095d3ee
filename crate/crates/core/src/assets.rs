//! Files shipped in the repository's `assets/` directory, embedded so that
//! tests and the CLI work from any working directory.

pub const DEFAULT_MAP: &str = include_str!("../../../assets/default.map");
pub const DEFAULT_REGISTRY: &str = include_str!("../../../assets/default.registry");
pub const CORPUS: &str = include_str!("../../../assets/corpus.txt");
pub const ICL_EXAMPLES: &str = include_str!("../../../assets/icl_examples.txt");
pub const RULES: &str = include_str!("../../../assets/translator.rules");
pub const TEMPLATES: &str = include_str!("../../../assets/feedback.templates");
pub const KNOWLEDGE_BASE: &str = include_str!("../../../assets/knowledge_base.txt");
pub const SCHEDULE: &str = include_str!("../../../assets/scenario.schedule");
