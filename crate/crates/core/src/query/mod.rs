//! Tokenization, the boolean query language, the inverted index and
//! standing watch queries.

mod ast;
mod index;
mod normalize;
mod parser;
mod watch;

pub use ast::{render_tree, QueryAst};
pub use index::{Field, Index, IndexDelta, IndexedDoc, Posting, PostingChange};
pub use normalize::normalize;
pub use parser::{parse_query, ParseError};
pub use watch::{Notification, WatchQuery, WatchRegistry};
