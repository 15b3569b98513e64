//! HTML table-structure vocabulary, tokenizer and tree parser.
//!
//! The vocabulary has 32 entries: four special tokens, the eight paired
//! structural tags, the open-ended `<td` and closing `>` used by spanning cells,
//! and `rowspan`/`colspan` attribute tokens for values 2 through 10. A span of
//! one is written as a plain `<td>`.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 32;
pub const MAX_SPAN: u8 = 10;

/// Index into the structure vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenId(pub u8);

impl TokenId {
    pub const SOS: TokenId = TokenId(0);
    pub const EOS: TokenId = TokenId(1);
    pub const PAD: TokenId = TokenId(2);
    pub const UNK: TokenId = TokenId(3);
    pub const THEAD: TokenId = TokenId(4);
    pub const THEAD_END: TokenId = TokenId(5);
    pub const TBODY: TokenId = TokenId(6);
    pub const TBODY_END: TokenId = TokenId(7);
    pub const TR: TokenId = TokenId(8);
    pub const TR_END: TokenId = TokenId(9);
    pub const TD: TokenId = TokenId(10);
    pub const TD_END: TokenId = TokenId(11);
    pub const TD_OPEN: TokenId = TokenId(12);
    pub const TAG_CLOSE: TokenId = TokenId(13);
    const ROWSPAN_BASE: u8 = 14;
    const COLSPAN_BASE: u8 = 23;

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn rowspan(k: u8) -> TokenId {
        assert!((2..=MAX_SPAN).contains(&k));
        TokenId(Self::ROWSPAN_BASE + k - 2)
    }

    pub fn colspan(k: u8) -> TokenId {
        assert!((2..=MAX_SPAN).contains(&k));
        TokenId(Self::COLSPAN_BASE + k - 2)
    }

    pub fn is_special(self) -> bool {
        self.0 < 4
    }

    pub fn is_attribute(self) -> bool {
        self.0 >= Self::ROWSPAN_BASE && (self.0 as usize) < VOCAB_SIZE
    }

    /// `Some((is_rowspan, value))` for attribute tokens.
    pub fn attribute(self) -> Option<(bool, u8)> {
        if !self.is_attribute() {
            return None;
        }
        if self.0 < Self::COLSPAN_BASE {
            Some((true, self.0 - Self::ROWSPAN_BASE + 2))
        } else {
            Some((false, self.0 - Self::COLSPAN_BASE + 2))
        }
    }
}

/// The 32-entry structure vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<String>,
}

pub fn build_vocab() -> Vocabulary {
    let mut entries: Vec<String> = [
        "<sos>", "<eos>", "<pad>", "<unk>", "<thead>", "</thead>", "<tbody>", "</tbody>", "<tr>",
        "</tr>", "<td>", "</td>", "<td", ">",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for attr in ["rowspan", "colspan"] {
        for k in 2..=MAX_SPAN {
            entries.push(format!(" {attr}=\"{k}\""));
        }
    }
    debug_assert_eq!(entries.len(), VOCAB_SIZE);
    Vocabulary { entries }
}

/// Shared canonical vocabulary.
pub fn vocab() -> &'static Vocabulary {
    static V: OnceLock<Vocabulary> = OnceLock::new();
    V.get_or_init(build_vocab)
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.entries[id.index()]
    }

    pub fn id(&self, s: &str) -> Option<TokenId> {
        self.entries.iter().position(|e| e == s).map(|i| TokenId(i as u8))
    }

    /// `id` for known strings, `<unk>` otherwise.
    pub fn id_or_unk(&self, s: &str) -> TokenId {
        self.id(s).unwrap_or(TokenId::UNK)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &str)> {
        self.entries.iter().enumerate().map(|(i, s)| (TokenId(i as u8), s.as_str()))
    }
}

/// A sequence of structure tokens, optionally framed by `<sos>` … `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub framed: bool,
}

impl TokenSeq {
    pub fn unframed(ids: Vec<TokenId>) -> Self {
        Self { ids, framed: false }
    }

    /// Wraps structure tokens in `<sos>` … `<eos>`.
    pub fn frame(body: &[TokenId]) -> Self {
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(TokenId::SOS);
        ids.extend_from_slice(body);
        ids.push(TokenId::EOS);
        Self { ids, framed: true }
    }

    /// Checks the framing invariant: leading `<sos>`, at most one `<eos>`, which
    /// is last apart from trailing `<pad>`.
    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.ids.iter().position(|t| t.index() >= VOCAB_SIZE) {
            return Err(Error::MalformedStructure { position: p, reason: "id out of range".into() });
        }
        if !self.framed {
            return Ok(());
        }
        if self.ids.first() != Some(&TokenId::SOS) {
            return Err(Error::MalformedStructure { position: 0, reason: "missing <sos>".into() });
        }
        if let Some(e) = self.ids.iter().position(|&t| t == TokenId::EOS) {
            if let Some(bad) = self.ids[e + 1..].iter().position(|&t| t != TokenId::PAD) {
                return Err(Error::MalformedStructure {
                    position: e + 1 + bad,
                    reason: "token after <eos>".into(),
                });
            }
        }
        Ok(())
    }

    /// Structure tokens with framing and padding removed (stops at `<eos>`).
    pub fn body(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.ids.len());
        for (i, &t) in self.ids.iter().enumerate() {
            match t {
                TokenId::SOS if i == 0 => {}
                TokenId::EOS => break,
                TokenId::PAD => {}
                _ => out.push(t),
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_strings(&self) -> Vec<String> {
        let v = vocab();
        self.ids.iter().map(|&t| v.token(t).to_string()).collect()
    }

    /// Maps strings to ids; strings outside the vocabulary become `<unk>`.
    pub fn from_strings<S: AsRef<str>>(tokens: &[S]) -> Self {
        let v = vocab();
        let ids: Vec<TokenId> = tokens.iter().map(|s| v.id_or_unk(s.as_ref())).collect();
        let framed = ids.first() == Some(&TokenId::SOS);
        Self { ids, framed }
    }

    pub fn count_unknown(&self) -> usize {
        self.ids.iter().filter(|&&t| t == TokenId::UNK).count()
    }
}

/// Greedy longest-match tokenization of a structure string.
///
/// Spans that match no vocabulary entry run up to the next `<` and become one `<unk>`.
pub fn tokenize(html: &str) -> TokenSeq {
    let v = vocab();
    let candidates: Vec<(TokenId, &str)> = v.iter().filter(|(id, _)| !id.is_special()).collect();
    let mut ids = Vec::new();
    let mut rest = html;
    while !rest.is_empty() {
        let best = candidates
            .iter()
            .filter(|(_, s)| rest.starts_with(*s))
            .max_by_key(|(_, s)| s.len());
        match best {
            Some(&(id, s)) => {
                ids.push(id);
                rest = &rest[s.len()..];
            }
            None => {
                let skip = rest[1..].find('<').map(|p| p + 1).unwrap_or(rest.len());
                ids.push(TokenId::UNK);
                rest = &rest[skip..];
            }
        }
    }
    TokenSeq::unframed(ids)
}

/// Concatenates token strings, dropping `<sos>`, `<eos>` and `<pad>`.
pub fn detokenize(seq: &TokenSeq) -> Result<String> {
    let v = vocab();
    let mut out = String::new();
    for (i, &t) in seq.ids.iter().enumerate() {
        match t {
            TokenId::UNK => return Err(Error::UnknownToken(i)),
            TokenId::SOS | TokenId::EOS | TokenId::PAD => {}
            _ => out.push_str(v.token(t)),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Table,
    Thead,
    Tbody,
    Tr,
    Td,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::Table => "table",
            NodeKind::Thead => "thead",
            NodeKind::Tbody => "tbody",
            NodeKind::Tr => "tr",
            NodeKind::Td => "td",
        };
        f.write_str(s)
    }
}

/// One node of a table tree. Spans are `None` when absent (i.e. equal to one).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TableNode {
    pub kind: NodeKind,
    pub rowspan: Option<u8>,
    pub colspan: Option<u8>,
    pub children: Vec<TableNode>,
}

impl TableNode {
    pub fn new(kind: NodeKind) -> Self {
        Self { kind, rowspan: None, colspan: None, children: Vec::new() }
    }

    pub fn with_children(kind: NodeKind, children: Vec<TableNode>) -> Self {
        Self { kind, rowspan: None, colspan: None, children }
    }

    pub fn td() -> Self {
        Self::new(NodeKind::Td)
    }

    pub fn td_span(rowspan: u8, colspan: u8) -> Self {
        Self {
            kind: NodeKind::Td,
            rowspan: (rowspan > 1).then_some(rowspan),
            colspan: (colspan > 1).then_some(colspan),
            children: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(TableNode::size).sum::<usize>()
    }

    pub fn is_spanning(&self) -> bool {
        self.rowspan.is_some() || self.colspan.is_some()
    }

    /// Node identity used by tree edit distance: label plus span attributes.
    pub fn label(&self) -> (NodeKind, u8, u8) {
        (self.kind, self.rowspan.unwrap_or(1), self.colspan.unwrap_or(1))
    }

    fn any(&self, pred: &impl Fn(&TableNode) -> bool) -> bool {
        pred(self) || self.children.iter().any(|c| c.any(pred))
    }

    fn emit(&self, out: &mut Vec<TokenId>) {
        let (open, close) = match self.kind {
            NodeKind::Table => {
                for c in &self.children {
                    c.emit(out);
                }
                return;
            }
            NodeKind::Thead => (TokenId::THEAD, TokenId::THEAD_END),
            NodeKind::Tbody => (TokenId::TBODY, TokenId::TBODY_END),
            NodeKind::Tr => (TokenId::TR, TokenId::TR_END),
            NodeKind::Td => (TokenId::TD, TokenId::TD_END),
        };
        if self.kind == NodeKind::Td && self.is_spanning() {
            out.push(TokenId::TD_OPEN);
            if let Some(r) = self.rowspan {
                out.push(TokenId::rowspan(r));
            }
            if let Some(c) = self.colspan {
                out.push(TokenId::colspan(c));
            }
            out.push(TokenId::TAG_CLOSE);
        } else {
            out.push(open);
        }
        for c in &self.children {
            c.emit(out);
        }
        out.push(close);
    }
}

/// Rooted ordered table tree; the root is always a synthetic `table` node.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TableTree {
    pub root: TableNode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableClass {
    Simple,
    Complex,
}

impl TableTree {
    pub fn new(children: Vec<TableNode>) -> Self {
        Self { root: TableNode::with_children(NodeKind::Table, children) }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    /// Number of nodes including the synthetic root.
    pub fn size(&self) -> usize {
        self.root.size()
    }

    /// Canonical unframed token sequence for this tree.
    pub fn to_tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::new();
        self.root.emit(&mut out);
        out
    }
}

pub fn classify(tree: &TableTree) -> TableClass {
    if tree.root.any(&|n| n.is_spanning()) {
        TableClass::Complex
    } else {
        TableClass::Simple
    }
}

fn malformed(position: usize, reason: impl Into<String>) -> Error {
    Error::MalformedStructure { position, reason: reason.into() }
}

/// Parses structure tokens into a [`TableTree`] under an implicit `table` root.
///
/// A leading `<sos>` is skipped, parsing stops at `<eos>`, and `<pad>` is ignored.
pub fn parse_tree(seq: &TokenSeq) -> Result<TableTree> {
    // Stack of open elements; index 0 is the synthetic root.
    let mut stack: Vec<TableNode> = vec![TableNode::new(NodeKind::Table)];
    let mut ids = seq.ids.iter().copied().enumerate().peekable();
    if let Some(&(_, TokenId::SOS)) = ids.peek() {
        ids.next();
    }

    while let Some((pos, t)) = ids.next() {
        let top = stack.last().expect("root never popped").kind;
        match t {
            TokenId::EOS => break,
            TokenId::PAD => {}
            TokenId::SOS => return Err(malformed(pos, "unexpected <sos>")),
            TokenId::UNK => return Err(malformed(pos, "unknown token")),
            TokenId::THEAD | TokenId::TBODY => {
                if top != NodeKind::Table {
                    return Err(malformed(pos, format!("section inside {top}")));
                }
                let kind = if t == TokenId::THEAD { NodeKind::Thead } else { NodeKind::Tbody };
                stack.push(TableNode::new(kind));
            }
            TokenId::TR => {
                if !matches!(top, NodeKind::Table | NodeKind::Thead | NodeKind::Tbody) {
                    return Err(malformed(pos, format!("<tr> inside {top}")));
                }
                stack.push(TableNode::new(NodeKind::Tr));
            }
            TokenId::TD => {
                if top != NodeKind::Tr {
                    return Err(malformed(pos, format!("<td> inside {top}")));
                }
                stack.push(TableNode::td());
            }
            TokenId::TD_OPEN => {
                if top != NodeKind::Tr {
                    return Err(malformed(pos, format!("<td inside {top}")));
                }
                let mut node = TableNode::td();
                loop {
                    let Some((apos, a)) = ids.next() else {
                        return Err(malformed(pos, "unterminated <td"));
                    };
                    if a == TokenId::TAG_CLOSE {
                        break;
                    }
                    let Some((is_row, k)) = a.attribute() else {
                        return Err(malformed(apos, "expected attribute or >"));
                    };
                    let slot = if is_row { &mut node.rowspan } else { &mut node.colspan };
                    if slot.replace(k).is_some() {
                        return Err(malformed(apos, "duplicate attribute"));
                    }
                }
                if !node.is_spanning() {
                    return Err(malformed(pos, "<td …> without attributes"));
                }
                stack.push(node);
            }
            TokenId::TAG_CLOSE => return Err(malformed(pos, "stray >")),
            t if t.is_attribute() => return Err(malformed(pos, "attribute outside <td")),
            TokenId::THEAD_END | TokenId::TBODY_END | TokenId::TR_END | TokenId::TD_END => {
                let want = match t {
                    TokenId::THEAD_END => NodeKind::Thead,
                    TokenId::TBODY_END => NodeKind::Tbody,
                    TokenId::TR_END => NodeKind::Tr,
                    _ => NodeKind::Td,
                };
                if top != want {
                    return Err(malformed(pos, format!("closing {want} while {top} is open")));
                }
                let node = stack.pop().unwrap();
                stack.last_mut().unwrap().children.push(node);
            }
            other => return Err(malformed(pos, format!("token id {} out of range", other.0))),
        }
    }

    if stack.len() != 1 {
        let open = stack.last().unwrap().kind;
        return Err(malformed(seq.ids.len(), format!("unclosed {open}")));
    }
    Ok(TableTree { root: stack.pop().unwrap() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(xs: &[TokenId]) -> TokenSeq {
        TokenSeq::unframed(xs.to_vec())
    }

    #[test]
    fn vocabulary_composition() {
        let v = build_vocab();
        assert_eq!(v.len(), 32);
        for (id, s) in v.iter() {
            assert_eq!(v.id(s), Some(id));
            assert_eq!(v.token(id), s);
        }
        let paired = ["<thead>", "</thead>", "<tbody>", "</tbody>", "<tr>", "</tr>", "<td>", "</td>"];
        assert!(paired.iter().all(|s| v.id(s).is_some()));
        assert_eq!(v.iter().filter(|(id, _)| id.is_attribute()).count(), 18);
        assert_eq!(v.iter().filter(|(id, _)| id.is_special()).count(), 4);
        assert_eq!(v.id("<sos>"), Some(TokenId(0)));
        assert_eq!(v.id("<eos>"), Some(TokenId(1)));
        assert_eq!(v.id("<pad>"), Some(TokenId(2)));
        assert_eq!(v.id("<unk>"), Some(TokenId(3)));
        assert_eq!(v.token(TokenId::rowspan(2)), " rowspan=\"2\"");
        assert_eq!(v.token(TokenId::colspan(10)), " colspan=\"10\"");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("<tr><td></td></tr>").ids,
            vec![TokenId::TR, TokenId::TD, TokenId::TD_END, TokenId::TR_END]
        );
        assert_eq!(
            tokenize("<td rowspan=\"2\">").ids,
            vec![TokenId::TD_OPEN, TokenId::rowspan(2), TokenId::TAG_CLOSE]
        );
        assert_eq!(tokenize("<div>").ids, vec![TokenId::UNK]);
        // longest match must prefer the 10-span over a 1-prefix
        assert_eq!(
            tokenize("<td colspan=\"10\">").ids,
            vec![TokenId::TD_OPEN, TokenId::colspan(10), TokenId::TAG_CLOSE]
        );
        assert_eq!(
            tokenize("<tr><p></tr>").ids,
            vec![TokenId::TR, TokenId::UNK, TokenId::TR_END]
        );
    }

    #[test]
    fn detokenize_examples() {
        let s = ids(&[TokenId::TR, TokenId::TD, TokenId::TD_END, TokenId::TR_END]);
        assert_eq!(detokenize(&s).unwrap(), "<tr><td></td></tr>");
        assert_eq!(detokenize(&TokenSeq::frame(&[TokenId::TD, TokenId::TD_END])).unwrap(), "<td></td>");
        assert!(matches!(detokenize(&ids(&[TokenId::UNK])), Err(Error::UnknownToken(0))));
    }

    #[test]
    fn parse_examples() {
        let t = parse_tree(&ids(&[TokenId::TR, TokenId::TD, TokenId::TD_END, TokenId::TR_END])).unwrap();
        assert_eq!(t.size(), 3);
        assert_eq!(t.root.children[0].kind, NodeKind::Tr);

        let t = parse_tree(&ids(&[TokenId::TR, TokenId::TD_OPEN, TokenId::colspan(3), TokenId::TAG_CLOSE, TokenId::TD_END, TokenId::TR_END])).unwrap();
        assert_eq!(t.root.children[0].children[0].colspan, Some(3));

        assert!(matches!(
            parse_tree(&ids(&[TokenId::TR, TokenId::TD_END])),
            Err(Error::MalformedStructure { .. })
        ));
    }

    #[test]
    fn spanning_cell_directly_under_root_is_rejected() {
        // td must live inside tr
        let seq = ids(&[TokenId::TD_OPEN, TokenId::colspan(3), TokenId::TAG_CLOSE, TokenId::TD_END]);
        assert!(parse_tree(&seq).is_err());
    }

    #[test]
    fn parse_rejects_structural_violations() {
        let bad: &[&[TokenId]] = &[
            &[TokenId::TD, TokenId::TD_END],
            &[TokenId::TR, TokenId::TR, TokenId::TR_END, TokenId::TR_END],
            &[TokenId::TR, TokenId::rowspan(2), TokenId::TR_END],
            &[TokenId::TR, TokenId::TD_OPEN, TokenId::TAG_CLOSE, TokenId::TD_END, TokenId::TR_END],
            &[TokenId::TR, TokenId::TD_OPEN, TokenId::rowspan(2), TokenId::rowspan(3), TokenId::TAG_CLOSE, TokenId::TD_END, TokenId::TR_END],
            &[TokenId::THEAD, TokenId::TBODY, TokenId::TBODY_END, TokenId::THEAD_END],
            &[TokenId::TR],
            &[TokenId::TR, TokenId::TD_OPEN, TokenId::rowspan(2)],
            &[TokenId::TAG_CLOSE],
        ];
        for b in bad {
            assert!(parse_tree(&ids(b)).is_err(), "{b:?} should fail");
        }
    }

    #[test]
    fn framed_sequences_parse_and_validate() {
        let f = TokenSeq::frame(&[TokenId::TR, TokenId::TD, TokenId::TD_END, TokenId::TR_END]);
        f.validate().unwrap();
        assert_eq!(parse_tree(&f).unwrap().size(), 3);
        let mut padded = f.clone();
        padded.ids.extend([TokenId::PAD, TokenId::PAD]);
        padded.validate().unwrap();
        let mut bad = f.clone();
        bad.ids.push(TokenId::TR);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn classify_examples() {
        let simple = TableTree::new(vec![TableNode::with_children(NodeKind::Tr, vec![TableNode::td(), TableNode::td()])]);
        assert_eq!(classify(&simple), TableClass::Simple);
        let complex = TableTree::new(vec![TableNode::with_children(NodeKind::Tr, vec![TableNode::td_span(2, 1)])]);
        assert_eq!(classify(&complex), TableClass::Complex);
        assert_eq!(classify(&TableTree::empty()), TableClass::Simple);
    }

    #[test]
    fn to_tokens_round_trips() {
        let t = TableTree::new(vec![
            TableNode::with_children(NodeKind::Thead, vec![TableNode::with_children(NodeKind::Tr, vec![TableNode::td_span(1, 2)])]),
            TableNode::with_children(NodeKind::Tbody, vec![TableNode::with_children(NodeKind::Tr, vec![TableNode::td(), TableNode::td_span(3, 4)])]),
        ]);
        let toks = t.to_tokens();
        assert_eq!(parse_tree(&TokenSeq::unframed(toks.clone())).unwrap(), t);
        let html = detokenize(&TokenSeq::unframed(toks.clone())).unwrap();
        assert_eq!(tokenize(&html).ids, toks);
    }

    #[test]
    fn string_round_trip_maps_unknowns() {
        let s = TokenSeq::from_strings(&["<tr>", "<blink>", "</tr>"]);
        assert_eq!(s.ids, vec![TokenId::TR, TokenId::UNK, TokenId::TR_END]);
        assert_eq!(s.count_unknown(), 1);
        assert_eq!(s.to_strings()[1], "<unk>");
    }
}
