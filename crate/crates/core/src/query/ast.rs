use std::collections::BTreeSet;
use std::fmt;

/// Parsed boolean query. Parentheses only shape the tree; `Not` never wraps
/// another `Not`, and `And`/`Or` always have at least two children.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum QueryAst {
    Term(String),
    Phrase(Vec<String>),
    And(Vec<QueryAst>),
    Or(Vec<QueryAst>),
    Not(Box<QueryAst>),
}

impl QueryAst {
    /// Wraps in `Not`, collapsing a double negation.
    pub fn negate(self) -> QueryAst {
        match self {
            QueryAst::Not(inner) => *inner,
            other => QueryAst::Not(Box::new(other)),
        }
    }

    /// Distinct tokens outside any `Not` subtree; these drive scoring.
    pub fn positive_terms(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_positive(&mut out);
        out
    }

    fn collect_positive<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            QueryAst::Term(t) => {
                out.insert(t);
            }
            QueryAst::Phrase(ts) => out.extend(ts.iter().map(String::as_str)),
            QueryAst::And(cs) | QueryAst::Or(cs) => cs.iter().for_each(|c| c.collect_positive(out)),
            QueryAst::Not(_) => {}
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            QueryAst::Term(_) | QueryAst::Phrase(_) => 1,
            QueryAst::And(cs) | QueryAst::Or(cs) => {
                1 + cs.iter().map(QueryAst::depth).max().unwrap_or(0)
            }
            QueryAst::Not(c) => 1 + c.depth(),
        }
    }
}

fn is_keyword(word: &str) -> bool {
    ["and", "or", "not"].iter().any(|k| word.eq_ignore_ascii_case(k))
}

/// Fully parenthesized form; parsing it yields the same tree.
impl fmt::Display for QueryAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryAst::Term(t) if is_keyword(t) => write!(f, "\"{t}\""),
            QueryAst::Term(t) => f.write_str(t),
            QueryAst::Phrase(ts) => write!(f, "\"{}\"", ts.join(" ")),
            QueryAst::And(cs) | QueryAst::Or(cs) => {
                let op = if matches!(self, QueryAst::And(_)) { " AND " } else { " OR " };
                f.write_str("(")?;
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(op)?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
            QueryAst::Not(c) => write!(f, "NOT {c}"),
        }
    }
}

/// Indented tree dump used by the CLI.
pub fn render_tree(ast: &QueryAst) -> String {
    fn walk(ast: &QueryAst, depth: usize, out: &mut String) {
        let pad = "  ".repeat(depth);
        match ast {
            QueryAst::Term(t) => out.push_str(&format!("{pad}Term {t:?}\n")),
            QueryAst::Phrase(ts) => out.push_str(&format!("{pad}Phrase {ts:?}\n")),
            QueryAst::And(cs) | QueryAst::Or(cs) => {
                let name = if matches!(ast, QueryAst::And(_)) { "And" } else { "Or" };
                out.push_str(&format!("{pad}{name}\n"));
                cs.iter().for_each(|c| walk(c, depth + 1, out));
            }
            QueryAst::Not(c) => {
                out.push_str(&format!("{pad}Not\n"));
                walk(c, depth + 1, out);
            }
        }
    }
    let mut out = String::new();
    walk(ast, 0, &mut out);
    out
}
