use std::fs;
use std::path::Path;

use guicoder::dsl::{self, LeafTag};
use guicoder::render;
use guicoder::rng::SplitMix64;
use guicoder::synth::{build_dataset, example_program, gen_program, GenConfig, Manifest, Split};

// Produced by a standalone Python transcription of SplitMix64 and the
// generator's draw order.
const SEED_42: &str = "stack { row { label switch check img } row { check check } row { text check btn } \
row { label text slider img } row { check check img text } }";
const SEED_7_IDS: [&str; 3] = [
    "stack { row { label } row { text check text label } row { label check } row { check } }",
    "stack { row { img btn } row { slider switch check label } row { label label text } row { slider img } }",
    "stack { row { switch } row { slider label } row { btn check } row { img img text text } row { btn text switch img } }",
];

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

#[test]
fn splitmix_first_output() {
    assert_eq!(SplitMix64::new(0).next_u64(), 0xE220A8397B1DCDAF);
}

#[test]
fn seed_42_program() {
    let ast = gen_program(&GenConfig::default(), &mut SplitMix64::new(42));
    assert_eq!(dsl::serialize(&ast), SEED_42);
}

#[test]
fn dataset_programs_by_id() {
    let cfg = GenConfig { seed: 7, ..GenConfig::default() };
    for (id, expected) in SEED_7_IDS.iter().enumerate() {
        assert_eq!(dsl::serialize(&example_program(&cfg, id as u64)), *expected);
    }
}

// FNV-1a of the 128x128 RGB buffer, pinned from the first render.
const GOLDEN_RENDER_HASH: u64 = 0x6f69_321e_5b98_3007;

#[test]
fn render_golden_hash() {
    let ast = dsl::parse(dsl::tokenize(SEED_42).unwrap().ids()).unwrap();
    let img = render::render(&ast, 128, 128).unwrap();
    assert_eq!(fnv1a(img.data()), GOLDEN_RENDER_HASH);
}

#[test]
fn render_pixel_and_layout() {
    let ast = dsl::parse(dsl::tokenize("stack { row { btn } }").unwrap().ids()).unwrap();
    let img = render::render(&ast, 64, 64).unwrap();
    assert_eq!(img.pixel(32, 32), render::color(LeafTag::Btn));
    assert_eq!(img.pixel(0, 0), [255, 255, 255]);
    assert_eq!(render::render(&ast, 64, 64).unwrap(), img);
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "programs"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        names.sort();
        for p in names {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn dataset_is_deterministic_and_consistent() {
    let cfg = GenConfig { image_size: 64, seed: 11, ..GenConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest = build_dataset(5, 2, &cfg, a.path()).unwrap();
    build_dataset(5, 2, &cfg, b.path()).unwrap();
    let tree = tree_bytes(a.path());
    assert_eq!(tree.len(), 1 + 7 + 7);
    assert_eq!(tree, tree_bytes(b.path()));

    let loaded = Manifest::load(a.path()).unwrap();
    assert_eq!(loaded, manifest);
    assert_eq!((loaded.split(Split::Train).count(), loaded.split(Split::Test).count()), (5, 2));
    for entry in &loaded.entries {
        let text = fs::read_to_string(a.path().join(&entry.code)).unwrap();
        let ast = dsl::parse(dsl::tokenize(&text).unwrap().ids()).unwrap();
        let stored = fs::read(a.path().join(&entry.image)).unwrap();
        assert_eq!(render::render(&ast, 64, 64).unwrap().to_ppm_bytes(), stored, "example {}", entry.id);
    }
}
