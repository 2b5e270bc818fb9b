//! Hierarchical conversational memory: facts clustered into scenes, a
//! persona distilled from scenes, and associative retrieval across levels.

pub mod construction;
pub mod embedding;
pub mod eval;
pub mod graph;
pub mod http;
pub mod model;
pub mod operators;
pub mod prompts;
pub mod retrieval;
pub mod store;
pub mod text;

pub use construction::{construct_memory, Constructed, ConstructionConfig, Conversation, Turn};
pub use embedding::{EmbeddingProvider, HashEmbedder, RemoteEmbedder};
pub use model::{FactUnit, MemoryBank, PersonaDimension, QuestionCategory, RetrievedSet, SceneUnit, UnitRef};
pub use operators::{ChatBackend, MockBackend, RemoteBackend};
pub use retrieval::{retrieve, RetrievalConfig, Retriever, Strategy};
pub use store::{load_bank, save_bank};
