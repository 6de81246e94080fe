use std::fmt;

use crate::error::{Error, Result};
use crate::span::Span;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TreeNode {
    Leaf(String),
    Internal { label: String, children: Vec<TreeNode> },
}

/// Rooted ordered constituency tree whose leaves are the sentence tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConstituencyTree {
    root: TreeNode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSpan {
    pub label: String,
    pub span: Span,
}

impl ConstituencyTree {
    pub fn new(root: TreeNode) -> Result<Self> {
        match &root {
            TreeNode::Internal { children, .. } if !children.is_empty() => Ok(ConstituencyTree { root }),
            _ => Err(Error::Data("tree root must be an internal node with children".into())),
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        walk_leaves(&self.root, 0, &mut |tok, _| out.push(tok.to_string()));
        out
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        walk_leaves(&self.root, 0, &mut |_, _| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Depth of every leaf, with the root at depth 0.
    pub fn leaf_depths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        walk_leaves(&self.root, 0, &mut |_, d| out.push(d));
        out
    }

    /// Every internal node's label and span, in preorder.
    pub fn labeled_spans(&self) -> Vec<LabeledSpan> {
        let mut out = Vec::new();
        collect_spans(&self.root, &mut 1, &mut out);
        out
    }

    /// For every leaf, the preorder index of its parent node (among internal nodes).
    pub(crate) fn leaf_parents(&self) -> Vec<usize> {
        fn go(node: &TreeNode, counter: &mut usize, out: &mut Vec<usize>) {
            if let TreeNode::Internal { children, .. } = node {
                let me = *counter;
                *counter += 1;
                for c in children {
                    match c {
                        TreeNode::Leaf(_) => out.push(me),
                        internal => go(internal, counter, out),
                    }
                }
            }
        }
        let mut out = Vec::new();
        go(&self.root, &mut 0, &mut out);
        out
    }
}

fn walk_leaves(node: &TreeNode, depth: usize, f: &mut impl FnMut(&str, usize)) {
    match node {
        TreeNode::Leaf(t) => f(t, depth),
        TreeNode::Internal { children, .. } => {
            for c in children {
                walk_leaves(c, depth + 1, f);
            }
        }
    }
}

fn collect_spans(node: &TreeNode, next: &mut usize, out: &mut Vec<LabeledSpan>) -> (usize, usize) {
    match node {
        TreeNode::Leaf(_) => {
            let p = *next;
            *next += 1;
            (p, p)
        }
        TreeNode::Internal { label, children } => {
            let slot = out.len();
            out.push(LabeledSpan {
                label: label.clone(),
                span: Span::singleton(1),
            });
            let start = *next;
            let mut end = start;
            for c in children {
                end = collect_spans(c, next, out).1;
            }
            out[slot].span = Span::new(start, end);
            (start, end)
        }
    }
}

impl fmt::Display for TreeNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeNode::Leaf(t) => f.write_str(t),
            TreeNode::Internal { label, children } => {
                f.write_str("(")?;
                f.write_str(label)?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 || !label.is_empty() {
                        f.write_str(" ")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl fmt::Display for ConstituencyTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

impl std::str::FromStr for ConstituencyTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_ptb_bracketed(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn lex(line: &str) -> Vec<(usize, Tok<'_>)> {
    let bytes = line.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'(' => {
                out.push((i, Tok::Open));
                i += 1;
            }
            b')' => {
                out.push((i, Tok::Close));
                i += 1;
            }
            b if b.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !matches!(bytes[i], b'(' | b')') && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                out.push((start, Tok::Atom(&line[start..i])));
            }
        }
    }
    out
}

/// Parses one bracketed tree such as `(S (NP the dog) (VP barks))`.
///
/// The label may be omitted (`((S ...))`). Leaves are bare atoms.
pub fn parse_ptb_bracketed(line: &str) -> Result<ConstituencyTree> {
    let toks = lex(line);
    let mut pos = 0;
    let end = line.len();
    let at = |pos: usize| toks.get(pos).map_or(end, |t| t.0);
    if toks.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            message: "empty input".into(),
        });
    }
    if toks[0].1 != Tok::Open {
        return Err(Error::Parse {
            offset: toks[0].0,
            message: "tree must start with '('".into(),
        });
    }
    let root = parse_node(&toks, &mut pos, end)?;
    if pos < toks.len() {
        return Err(Error::Parse {
            offset: at(pos),
            message: "trailing input after tree".into(),
        });
    }
    ConstituencyTree::new(root).map_err(|e| Error::Parse {
        offset: 0,
        message: e.to_string(),
    })
}

fn parse_node(toks: &[(usize, Tok<'_>)], pos: &mut usize, end: usize) -> Result<TreeNode> {
    let open_at = toks[*pos].0;
    *pos += 1;
    let label = match toks.get(*pos) {
        Some((_, Tok::Atom(a))) => {
            *pos += 1;
            a.to_string()
        }
        _ => String::new(),
    };
    let mut children = Vec::new();
    loop {
        match toks.get(*pos) {
            None => {
                return Err(Error::Parse {
                    offset: end,
                    message: format!("unbalanced '(' opened at byte {open_at}"),
                })
            }
            Some((off, Tok::Close)) => {
                if children.is_empty() {
                    return Err(Error::Parse {
                        offset: *off,
                        message: "constituent without children".into(),
                    });
                }
                *pos += 1;
                return Ok(TreeNode::Internal { label, children });
            }
            Some((_, Tok::Open)) => children.push(parse_node(toks, pos, end)?),
            Some((_, Tok::Atom(a))) => {
                children.push(TreeNode::Leaf(a.to_string()));
                *pos += 1;
            }
        }
    }
}
