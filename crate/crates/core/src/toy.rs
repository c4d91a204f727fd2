//! Generated domain-shift corpora for tests and the toy study.
//!
//! Every project shares three global lint fixes and has one project-specific
//! fix: a restricted `legacyCall` is replaced by the project's own API
//! function. A project is recognisable from its context (an import of its
//! core module) and its identifier vocabulary, so the project rule is
//! learnable from that project's data and only from it.
//!
//! Samples carry no detector message, so repair inputs built from real and
//! from synthesized samples share one token layout.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Sample};
use crate::error::Result;

pub const PROJECT_RULE: &str = "no-restricted-syntax";
pub const LEGACY_CALL: &str = "legacyCall";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyProject {
    pub name: String,
    pub size: usize,
    pub module: String,
    pub api: String,
    pub prefixes: Vec<String>,
}

impl ToyProject {
    pub fn new(name: &str, size: usize, prefixes: &[&str]) -> Self {
        ToyProject {
            name: name.to_string(),
            size,
            module: format!("{name}Core"),
            api: format!("{name}Invoke"),
            prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
        }
    }
}

/// Five projects; sorted by size with stride 2 the 2nd and 4th (`borealis`,
/// `delta`) become targets and the other three stay source.
pub fn default_projects() -> Vec<ToyProject> {
    vec![
        ToyProject::new("atlas", 300, &["map", "route", "tile", "layer", "zoom"]),
        ToyProject::new("borealis", 280, &["aurora", "flux", "glow", "pulse", "arc"]),
        ToyProject::new("cobalt", 260, &["ore", "smelt", "forge", "ingot", "alloy"]),
        ToyProject::new("delta", 240, &["river", "silt", "bank", "flow", "reed"]),
        ToyProject::new("ember", 220, &["spark", "ash", "coal", "flame", "heat"]),
    ]
}

const SUFFIXES: [&str; 8] = [
    "Count", "Items", "Value", "Index", "Node", "List", "Cache", "State",
];

fn ident(rng: &mut ChaCha8Rng, prefixes: &[String]) -> String {
    format!(
        "{}{}",
        prefixes.choose(rng).expect("non-empty prefixes"),
        SUFFIXES.choose(rng).expect("non-empty")
    )
}

fn literal(rng: &mut ChaCha8Rng) -> String {
    rng.random_range(0..10).to_string()
}

/// One (error type, buggy, fixed) triple drawn from the project's rule mix:
/// 40% project rule, 20% each global rule.
fn draw_fix(rng: &mut ChaCha8Rng, p: &ToyProject) -> (&'static str, String, String) {
    let a = ident(rng, &p.prefixes);
    let b = ident(rng, &p.prefixes);
    let lit = literal(rng);
    match rng.random_range(0..5) {
        0 => (
            "no-var",
            format!("var {a} = {b} + {lit} ;"),
            format!("let {a} = {b} + {lit} ;"),
        ),
        1 => (
            "eqeqeq",
            format!("if ( {a} == {lit} ) {{"),
            format!("if ( {a} === {lit} ) {{"),
        ),
        2 => (
            "semi",
            format!("{a} = {b} * {lit}"),
            format!("{a} = {b} * {lit} ;"),
        ),
        _ => (
            PROJECT_RULE,
            format!("{LEGACY_CALL} ( {a} , {lit} ) ;"),
            format!("{} ( {a} , {lit} ) ;", p.api),
        ),
    }
}

pub fn project_samples(p: &ToyProject, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::corpus::fnv1a(p.name.as_bytes()));
    (0..p.size)
        .map(|i| {
            let (ty, buggy, fixed) = draw_fix(&mut rng, p);
            let callee = ident(&mut rng, &p.prefixes);
            let context = format!("import {} ; {callee} ( ) ;", p.module);
            Sample::new(
                format!("{}-{i:04}", p.name),
                &p.name,
                ty,
                "",
                buggy,
                fixed,
                context,
            )
        })
        .collect()
}

pub fn toy_corpus(projects: &[ToyProject], seed: u64) -> Result<Corpus> {
    let mut samples = Vec::new();
    for p in projects {
        samples.extend(project_samples(p, seed)?);
    }
    Corpus::new(samples)
}

/// Clean lines that each admit two bugs (`no-var` and `eqeqeq`); without the
/// error type the bug to inject is ambiguous. Returns `2 · lines` samples,
/// consecutive pairs sharing a clean line.
pub fn metadata_fixture(lines: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prefixes: Vec<String> = ["meta", "data", "tag", "kind", "mark"]
        .map(String::from)
        .to_vec();
    let mut out = Vec::with_capacity(2 * lines);
    for i in 0..lines {
        let a = ident(&mut rng, &prefixes);
        let b = ident(&mut rng, &prefixes);
        let lit = literal(&mut rng);
        let clean = format!("let {a} = {b} === {lit} ;");
        out.push(Sample::new(
            format!("fx-{i:04}-v"),
            "fixture",
            "no-var",
            "",
            format!("var {a} = {b} === {lit} ;"),
            clean.clone(),
            "",
        )?);
        out.push(Sample::new(
            format!("fx-{i:04}-e"),
            "fixture",
            "eqeqeq",
            "",
            format!("let {a} = {b} == {lit} ;"),
            clean,
            "",
        )?);
    }
    Ok(out)
}
