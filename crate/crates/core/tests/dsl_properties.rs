use guicoder::dsl::{self, ContainerTag, LeafTag, Node, ProgramAst};
use guicoder::rng::SplitMix64;
use guicoder::synth::{gen_program, GenConfig};
use proptest::prelude::*;

fn check_round_trips(ast: &ProgramAst) -> Result<(), String> {
    let text = dsl::serialize(ast);
    let tokens = dsl::tokenize(&text).map_err(|e| format!("{text}: {e}"))?;
    let reparsed = dsl::parse(tokens.ids()).map_err(|e| format!("{text}: {e}"))?;
    if &reparsed != ast || dsl::serialize(&reparsed) != text {
        return Err(format!("serialize/parse mismatch for {text}"));
    }
    let blocks = dsl::blockify(tokens.ids()).map_err(|e| format!("{text}: {e}"))?;
    let back = dsl::deblockify(&blocks).map_err(|e| format!("{text}: {e}"))?;
    if back != tokens {
        return Err(format!("deblockify(blockify) mismatch for {text}"));
    }
    if blocks.len() != ast.children().len() {
        return Err(format!("{} blocks for {} top-level children in {text}", blocks.len(), ast.children().len()));
    }
    Ok(())
}

#[test]
fn thousand_generated_programs() {
    let cfg = GenConfig::default();
    let mut rng = SplitMix64::new(2024);
    let mut failures = Vec::new();
    for i in 0..1000 {
        let ast = gen_program(&cfg, &mut rng);
        if let Err(e) = check_round_trips(&ast) {
            failures.push(format!("#{i}: {e}"));
        }
        let blocks = dsl::blockify(ast.tokens().ids()).unwrap();
        if blocks.len() != ast.row_count() {
            failures.push(format!("#{i}: {} blocks, {} rows", blocks.len(), ast.row_count()));
        }
    }
    assert!(failures.is_empty(), "{} failures:\n{}", failures.len(), failures.join("\n"));
}

#[test]
fn wide_generator_ranges() {
    let cfg = GenConfig { min_rows: 1, max_rows: 12, min_leaves: 1, max_leaves: 9, ..GenConfig::default() };
    let mut rng = SplitMix64::new(5);
    for _ in 0..200 {
        let ast = gen_program(&cfg, &mut rng);
        check_round_trips(&ast).unwrap();
        assert!((1..=12).contains(&ast.row_count()));
    }
}

fn leaf() -> impl Strategy<Value = Node> {
    (0..7usize).prop_map(|i| Node::Leaf(LeafTag::ALL[i]))
}

fn node() -> impl Strategy<Value = Node> {
    leaf().prop_recursive(3, 24, 4, |inner| {
        (prop_oneof![Just(ContainerTag::Stack), Just(ContainerTag::Row)], prop::collection::vec(inner, 1..4))
            .prop_map(|(tag, children)| Node::Container { tag, children })
    })
}

fn container() -> impl Strategy<Value = Node> {
    (prop_oneof![Just(ContainerTag::Stack), Just(ContainerTag::Row)], prop::collection::vec(node(), 1..4))
        .prop_map(|(tag, children)| Node::Container { tag, children })
}

proptest! {
    #[test]
    fn nested_programs_round_trip(children in prop::collection::vec(container(), 0..5)) {
        let ast = ProgramAst::new(children).unwrap();
        prop_assert_eq!(check_round_trips(&ast), Ok(()));
    }

    #[test]
    fn tokenize_ignores_whitespace_shape(seed in any::<u64>()) {
        let ast = gen_program(&GenConfig::default(), &mut SplitMix64::new(seed));
        let spaced = dsl::serialize(&ast).replace(' ', "\n\t ");
        prop_assert_eq!(dsl::tokenize(&spaced).unwrap(), ast.tokens());
    }
}
