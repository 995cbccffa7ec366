//! The GUI layout language: vocabulary, lexing, parsing, canonical printing,
//! and the block split used by the hierarchical decoder.
//!
//! A program is a `stack` whose children are containers. Containers hold
//! leaves or further containers:
//!
//! ```text
//! program = "stack" "{" row { row } "}" ;
//! row     = "row" "{" leaf { leaf } "}" ;
//! leaf    = "label" | "btn" | "switch" | "slider" | "img" | "text" | "check" ;
//! ```
//!
//! The parser also accepts a nested `stack` (or `row`) anywhere a leaf may
//! appear. The synthetic generator only ever emits the two-level form.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BLOCK_END: TokenId = 1;
pub const OPEN: TokenId = 2;
pub const CLOSE: TokenId = 3;
pub const STACK: TokenId = 4;
pub const ROW: TokenId = 5;

/// Canonical token strings, indexed by id.
pub const TOKENS: [&str; 13] = [
    "PAD",
    "BLOCK-END",
    "{",
    "}",
    "stack",
    "row",
    "label",
    "btn",
    "switch",
    "slider",
    "img",
    "text",
    "check",
];

/// Vocabulary size of the canonical language.
pub const VOCAB_SIZE: usize = TOKENS.len();

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DslError {
    #[error("unknown token `{word}` at position {position}")]
    UnknownToken { word: String, position: usize },
    #[error("syntax error at token {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("token sequence is not a valid program: {0}")]
    NotAProgram(Box<DslError>),
    #[error("malformed block {index}: {reason}")]
    MalformedBlock { index: usize, reason: &'static str },
}

/// Bijection between token strings and dense ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn canonical() -> Self {
        let tokens: Vec<String> = TOKENS.iter().map(|t| t.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::canonical()
    }
}

/// Flat program as token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    /// Panics if an id is outside the canonical vocabulary.
    pub fn new(ids: Vec<TokenId>) -> Self {
        assert!(ids.iter().all(|&id| id < VOCAB_SIZE), "token id out of range");
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &id) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(TOKENS[id])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContainerTag {
    Stack,
    Row,
}

impl ContainerTag {
    pub fn token(self) -> TokenId {
        match self {
            ContainerTag::Stack => STACK,
            ContainerTag::Row => ROW,
        }
    }

    pub fn name(self) -> &'static str {
        TOKENS[self.token()]
    }

    fn from_token(id: TokenId) -> Option<Self> {
        match id {
            STACK => Some(ContainerTag::Stack),
            ROW => Some(ContainerTag::Row),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LeafTag {
    Label,
    Btn,
    Switch,
    Slider,
    Img,
    Text,
    Check,
}

impl LeafTag {
    pub const ALL: [LeafTag; 7] = [
        LeafTag::Label,
        LeafTag::Btn,
        LeafTag::Switch,
        LeafTag::Slider,
        LeafTag::Img,
        LeafTag::Text,
        LeafTag::Check,
    ];

    pub fn token(self) -> TokenId {
        6 + self as usize
    }

    pub fn name(self) -> &'static str {
        TOKENS[self.token()]
    }

    pub fn from_token(id: TokenId) -> Option<Self> {
        (6..VOCAB_SIZE).contains(&id).then(|| Self::ALL[id - 6])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Node {
    Container { tag: ContainerTag, children: Vec<Node> },
    Leaf(LeafTag),
}

impl Node {
    pub fn row(leaves: impl IntoIterator<Item = LeafTag>) -> Node {
        Node::Container {
            tag: ContainerTag::Row,
            children: leaves.into_iter().map(Node::Leaf).collect(),
        }
    }

    /// Number of nodes in this subtree, including itself.
    pub fn node_count(&self) -> usize {
        match self {
            Node::Leaf(_) => 1,
            Node::Container { children, .. } => {
                1 + children.iter().map(Node::node_count).sum::<usize>()
            }
        }
    }

    fn write_tokens(&self, out: &mut Vec<TokenId>) {
        match self {
            Node::Leaf(tag) => out.push(tag.token()),
            Node::Container { tag, children } => {
                out.push(tag.token());
                out.push(OPEN);
                for child in children {
                    child.write_tokens(out);
                }
                out.push(CLOSE);
            }
        }
    }
}

/// A validated program tree. The root is always a `stack`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProgramAst {
    children: Vec<Node>,
}

impl ProgramAst {
    /// Every child must be a container; inner containers must be non-empty.
    pub fn new(children: Vec<Node>) -> Result<Self, DslError> {
        let ast = ProgramAst { children };
        // Validate by round-tripping through the parser so there is one rule set.
        parse(&ast.tokens())?;
        Ok(ast)
    }

    pub fn children(&self) -> &[Node] {
        &self.children
    }

    pub fn row_count(&self) -> usize {
        self.children
            .iter()
            .filter(|n| matches!(n, Node::Container { tag: ContainerTag::Row, .. }))
            .count()
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(Node::node_count).sum::<usize>()
    }

    pub fn tokens(&self) -> TokenSeq {
        let mut out = vec![STACK, OPEN];
        for child in &self.children {
            child.write_tokens(&mut out);
        }
        out.push(CLOSE);
        TokenSeq(out)
    }
}

/// Splits on whitespace and maps each word to its id.
pub fn tokenize(text: &str) -> Result<TokenSeq, DslError> {
    let vocab = Vocab::canonical();
    text.split_whitespace()
        .enumerate()
        .map(|(position, word)| {
            vocab.id(word).ok_or_else(|| DslError::UnknownToken {
                word: word.to_string(),
                position,
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map(TokenSeq)
}

struct Parser<'a> {
    toks: &'a [TokenId],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, expected: impl Into<String>) -> DslError {
        DslError::Syntax { position: self.pos, expected: expected.into() }
    }

    fn peek(&self) -> Option<TokenId> {
        self.toks.get(self.pos).copied()
    }

    fn expect(&mut self, id: TokenId) -> Result<(), DslError> {
        if self.peek() == Some(id) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("`{}`", TOKENS[id])))
        }
    }

    /// Parses `{ item+ }` after a container keyword.
    fn body(&mut self, allow_leaves: bool) -> Result<Vec<Node>, DslError> {
        self.expect(OPEN)?;
        let mut children = Vec::new();
        loop {
            match self.peek() {
                Some(CLOSE) => {
                    if children.is_empty() {
                        return Err(self.err("a child element (empty container)"));
                    }
                    self.pos += 1;
                    return Ok(children);
                }
                None => return Err(self.err("`}` (unclosed brace)")),
                Some(id) => children.push(self.item(id, allow_leaves)?),
            }
        }
    }

    fn item(&mut self, id: TokenId, allow_leaves: bool) -> Result<Node, DslError> {
        if let Some(tag) = ContainerTag::from_token(id) {
            self.pos += 1;
            let children = self.body(true)?;
            return Ok(Node::Container { tag, children });
        }
        match LeafTag::from_token(id) {
            Some(tag) if allow_leaves => {
                self.pos += 1;
                Ok(Node::Leaf(tag))
            }
            Some(_) => Err(self.err("a container (leaf outside of a row)")),
            None => Err(self.err(if allow_leaves {
                "a container or leaf"
            } else {
                "a container"
            })),
        }
    }
}

/// Recursive-descent parse of a token sequence into a program tree.
///
/// The root `stack { }` may be empty (the degenerate empty program); every
/// inner container must hold at least one child.
pub fn parse(seq: &[TokenId]) -> Result<ProgramAst, DslError> {
    let mut p = Parser { toks: seq, pos: 0 };
    p.expect(STACK)?;
    p.expect(OPEN)?;
    let mut children = Vec::new();
    loop {
        match p.peek() {
            Some(CLOSE) => {
                p.pos += 1;
                break;
            }
            None => return Err(p.err("`}` (unclosed brace)")),
            Some(id) => children.push(p.item(id, false)?),
        }
    }
    if p.pos != seq.len() {
        return Err(p.err("end of program"));
    }
    Ok(ProgramAst { children })
}

/// Canonical single-space form.
pub fn serialize(ast: &ProgramAst) -> String {
    ast.tokens().to_string()
}

/// Ordered per-block token sequences, each terminated by `BLOCK-END`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockSeq(pub Vec<Vec<TokenId>>);

impl BlockSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vec<TokenId>> {
        self.0.iter()
    }

    pub fn token_count(&self) -> usize {
        self.0.iter().map(Vec::len).sum()
    }
}

/// Drops the outer `stack { ... }` and cuts the body into top-level groups,
/// each running from its container keyword to the brace that closes it.
pub fn blockify(seq: &[TokenId]) -> Result<BlockSeq, DslError> {
    parse(seq).map_err(|e| DslError::NotAProgram(Box::new(e)))?;
    let body = &seq[2..seq.len() - 1];
    let mut blocks = Vec::new();
    let mut start = 0;
    let mut depth = 0usize;
    for (i, &id) in body.iter().enumerate() {
        match id {
            OPEN => depth += 1,
            CLOSE => {
                depth -= 1;
                if depth == 0 {
                    let mut block = body[start..=i].to_vec();
                    block.push(BLOCK_END);
                    blocks.push(block);
                    start = i + 1;
                }
            }
            _ => {}
        }
    }
    Ok(BlockSeq(blocks))
}

fn check_block(index: usize, block: &[TokenId]) -> Result<(), DslError> {
    let malformed = |reason| DslError::MalformedBlock { index, reason };
    match block.split_last() {
        Some((&BLOCK_END, body)) => {
            if body.contains(&BLOCK_END) {
                return Err(malformed("BLOCK-END before the end of the block"));
            }
            let mut depth = 0i64;
            for &id in body {
                match id {
                    OPEN => depth += 1,
                    CLOSE => {
                        depth -= 1;
                        if depth < 0 {
                            return Err(malformed("unbalanced braces"));
                        }
                    }
                    _ => {}
                }
            }
            if depth != 0 {
                return Err(malformed("unbalanced braces"));
            }
            Ok(())
        }
        _ => Err(malformed("missing terminal BLOCK-END")),
    }
}

/// Inverse of [`blockify`].
pub fn deblockify(blocks: &BlockSeq) -> Result<TokenSeq, DslError> {
    for (i, block) in blocks.iter().enumerate() {
        check_block(i, block)?;
    }
    Ok(deblockify_lenient(blocks))
}

/// Concatenates blocks without validation, dropping every `BLOCK-END` and
/// `PAD`. Used for model output, which may be malformed.
pub fn deblockify_lenient(blocks: &BlockSeq) -> TokenSeq {
    let mut out = vec![STACK, OPEN];
    out.extend(
        blocks
            .iter()
            .flatten()
            .copied()
            .filter(|&id| id != BLOCK_END && id != PAD),
    );
    out.push(CLOSE);
    TokenSeq(out)
}

/// Best-effort conversion of an arbitrary token sequence into a valid
/// program. Valid programs come back unchanged. Otherwise stray tokens are
/// dropped, unclosed containers are closed, and empty containers removed.
pub fn repair(seq: &[TokenId]) -> ProgramAst {
    if let Ok(ast) = parse(seq) {
        return ast;
    }
    let body = match seq {
        [STACK, OPEN, rest @ ..] => rest,
        _ => seq,
    };

    // Each open frame collects children for one container.
    struct Frame {
        tag: ContainerTag,
        children: Vec<Node>,
        opened: bool,
    }
    fn close(stack: &mut Vec<Frame>, top: &mut Vec<Node>) {
        if let Some(frame) = stack.pop() {
            if frame.children.is_empty() {
                return;
            }
            let node = Node::Container { tag: frame.tag, children: frame.children };
            match stack.last_mut() {
                Some(parent) => parent.children.push(node),
                None => top.push(node),
            }
        }
    }

    let mut top = Vec::new();
    let mut stack: Vec<Frame> = Vec::new();
    for &id in body {
        if let Some(tag) = ContainerTag::from_token(id) {
            if matches!(stack.last(), Some(f) if !f.opened) {
                stack.pop();
            }
            stack.push(Frame { tag, children: Vec::new(), opened: false });
        } else if id == OPEN {
            if let Some(frame) = stack.last_mut().filter(|f| !f.opened) {
                frame.opened = true;
            }
        } else if id == CLOSE {
            if matches!(stack.last(), Some(f) if !f.opened) {
                stack.pop();
            }
            close(&mut stack, &mut top);
        } else if let Some(leaf) = LeafTag::from_token(id) {
            if matches!(stack.last(), Some(f) if !f.opened) {
                stack.pop();
            }
            match stack.last_mut() {
                Some(frame) => frame.children.push(Node::Leaf(leaf)),
                // A leaf at the top level gets its own row.
                None => top.push(Node::row([leaf])),
            }
        }
    }
    while !stack.is_empty() {
        if matches!(stack.last(), Some(f) if !f.opened) {
            stack.pop();
            continue;
        }
        close(&mut stack, &mut top);
    }
    ProgramAst { children: top }
}

/// One row per token: a single 1.0 at the token's id.
pub fn one_hot<F: Scalar>(seq: &[TokenId], vocab: &Vocab) -> Tensor<F> {
    let k = vocab.len();
    let mut t = Tensor::zeros(&[seq.len(), k]);
    for (i, &id) in seq.iter().enumerate() {
        t.data_mut()[i * k + id] = F::one();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> TokenSeq {
        tokenize(s).unwrap()
    }

    #[test]
    fn vocab_is_canonical() {
        let v = Vocab::canonical();
        assert_eq!(v.len(), 13);
        assert_eq!(v.id("BLOCK-END"), Some(1));
        assert_eq!(v.id("check"), Some(12));
        for (i, t) in TOKENS.iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
            assert_eq!(v.word(i), Some(*t));
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(toks("stack { }").ids(), &[STACK, OPEN, CLOSE]);
        assert!(toks("").is_empty());
        assert_eq!(
            tokenize("stack { bogus }"),
            Err(DslError::UnknownToken { word: "bogus".into(), position: 2 })
        );
        assert_eq!(toks("stack\n{\n\trow { btn }\n}").len(), 7);
    }

    #[test]
    fn parse_examples() {
        let ast = parse(&toks("stack { row { label btn } }")).unwrap();
        assert_eq!(ast.children().len(), 1);
        match &ast.children()[0] {
            Node::Container { tag: ContainerTag::Row, children } => assert_eq!(children.len(), 2),
            other => panic!("unexpected {other:?}"),
        }

        let err = parse(&toks("stack { row { } }")).unwrap_err();
        assert!(matches!(err, DslError::Syntax { position: 4, ref expected } if expected.contains("empty")));

        let err = parse(&toks("stack { row { label }")).unwrap_err();
        assert!(matches!(err, DslError::Syntax { position: 6, ref expected } if expected.contains("unclosed")));
    }

    #[test]
    fn parse_rejects_misplaced_tokens() {
        for bad in [
            "stack { label }",
            "stack { row { label BLOCK-END } }",
            "stack { row { PAD } }",
            "row { label }",
            "stack { row { label } } }",
            "stack { row { label } } row",
            "stack { row label }",
            "",
        ] {
            assert!(parse(&toks(bad)).is_err(), "{bad} should not parse");
        }
        assert!(parse(&toks("stack { }")).is_ok());
        assert!(parse(&toks("stack { row { stack { label } btn } }")).is_ok());
    }

    #[test]
    fn serialize_canonical() {
        let ast = ProgramAst::new(vec![Node::row([LeafTag::Label])]).unwrap();
        assert_eq!(serialize(&ast), "stack { row { label } }");
        let messy = "stack {\n  row { btn   img }\n}\n";
        let ast = parse(&toks(messy)).unwrap();
        assert_eq!(serialize(&ast), "stack { row { btn img } }");
        assert_eq!(serialize(&parse(&toks(&serialize(&ast))).unwrap()), serialize(&ast));
    }

    #[test]
    fn blockify_examples() {
        let b = blockify(&toks("stack { row { label btn } row { slider } }")).unwrap();
        assert_eq!(
            b.0,
            vec![
                toks("row { label btn } BLOCK-END").into_ids(),
                toks("row { slider } BLOCK-END").into_ids(),
            ]
        );
        let b = blockify(&toks("stack { row { stack { label } btn } }")).unwrap();
        assert_eq!(b.0, vec![toks("row { stack { label } btn } BLOCK-END").into_ids()]);
        assert!(blockify(&toks("stack { }")).unwrap().is_empty());
        assert!(matches!(blockify(&toks("stack { row { } }")), Err(DslError::NotAProgram(_))));
    }

    #[test]
    fn deblockify_examples() {
        let src = toks("stack { row { label btn } row { slider } }");
        assert_eq!(deblockify(&blockify(&src).unwrap()).unwrap(), src);
        assert_eq!(deblockify(&BlockSeq::default()).unwrap(), toks("stack { }"));

        let missing = BlockSeq(vec![toks("row { label }").into_ids()]);
        assert!(matches!(deblockify(&missing), Err(DslError::MalformedBlock { index: 0, .. })));
        let unbalanced = BlockSeq(vec![toks("row { label BLOCK-END").into_ids()]);
        assert!(matches!(deblockify(&unbalanced), Err(DslError::MalformedBlock { .. })));
        let early = BlockSeq(vec![toks("row { BLOCK-END label } BLOCK-END").into_ids()]);
        assert!(deblockify(&early).is_err());
    }

    #[test]
    fn one_hot_rows() {
        let v = Vocab::canonical();
        let t: Tensor<f32> = one_hot(&[0], &v);
        assert_eq!(t.shape(), &[1, 13]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data().iter().sum::<f32>(), 1.0);
        let t: Tensor<f32> = one_hot(&[], &v);
        assert_eq!(t.shape(), &[0, 13]);
        let t: Tensor<f64> = one_hot(&toks("stack { row { img } }"), &v);
        for row in t.data().chunks(13) {
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
        assert_eq!(t.data()[2 * 13 + ROW], 1.0);
    }

    #[test]
    fn repair_produces_parseable_programs() {
        let cases = [
            ("stack { row { label } }", "stack { row { label } }"),
            ("stack { row { label } row { btn", "stack { row { label } row { btn } }"),
            ("stack { row { } row { img } }", "stack { row { img } }"),
            ("stack { label }", "stack { row { label } }"),
            ("} } {", "stack { }"),
            ("stack { row { text } } } row { slider } }", "stack { row { text } row { slider } }"),
            ("stack { row row { check } }", "stack { row { check } }"),
        ];
        for (input, expected) in cases {
            let ast = repair(&toks(input));
            assert_eq!(serialize(&ast), expected, "repairing {input}");
        }
    }

    #[test]
    fn leaf_tag_tokens_match_vocab() {
        for tag in LeafTag::ALL {
            assert_eq!(LeafTag::from_token(tag.token()), Some(tag));
            assert_eq!(Vocab::canonical().id(tag.name()), Some(tag.token()));
        }
        assert_eq!(LeafTag::from_token(ROW), None);
    }
}
