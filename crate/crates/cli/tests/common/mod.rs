#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfact::numeric::Rng;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lfact"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "cl", "dr",
    "st", "th", "sh", "pr", "gr", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "nd", "st", "m"];

fn pick<'a>(rng: &mut Rng, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len() as u64) as usize]
}

fn stem(rng: &mut Rng) -> String {
    let syllables = 1 + rng.below(3) as usize;
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}{}",
                pick(rng, ONSETS),
                pick(rng, VOWELS),
                pick(rng, CODAS)
            )
        })
        .collect()
}

/// Zipf-like draw over `n` items.
fn zipf(rng: &mut Rng, n: usize) -> usize {
    let u = rng.uniform();
    ((n as f64).powf(u) - 1.0) as usize % n
}

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
}

impl Lexicon {
    fn new(rng: &mut Rng) -> Self {
        let mut make = |n: usize, suffixes: &[&str]| -> Vec<String> {
            (0..n)
                .map(|_| format!("{}{}", stem(rng), pick(rng, suffixes)))
                .collect()
        };
        Self {
            nouns: make(300, &["", "er", "tion", "ment", "ity"]),
            verbs: make(150, &["s", "ed", "es", "ifies"]),
            adjectives: make(120, &["ous", "al", "ive", "ic", "ful"]),
        }
    }

    fn phrase(&self, rng: &mut Rng, out: &mut String) {
        out.push_str(["the ", "a ", "every ", "this ", "some "][zipf(rng, 5)]);
        if rng.uniform() < 0.4 {
            out.push_str(&self.adjectives[zipf(rng, self.adjectives.len())]);
            out.push(' ');
        }
        out.push_str(&self.nouns[zipf(rng, self.nouns.len())]);
    }

    fn sentence(&self, rng: &mut Rng, out: &mut String) {
        let start = out.len();
        self.phrase(rng, out);
        out.push(' ');
        out.push_str(&self.verbs[zipf(rng, self.verbs.len())]);
        out.push(' ');
        self.phrase(rng, out);
        let r = rng.uniform();
        if r < 0.2 {
            out.push_str(" (");
            self.phrase(rng, out);
            out.push(')');
        } else if r < 0.35 {
            out.push_str(&format!(" in {}", 1800 + rng.below(220)));
        } else if r < 0.55 {
            out.push_str(", and ");
            self.phrase(rng, out);
            out.push(' ');
            out.push_str(&self.verbs[zipf(rng, self.verbs.len())]);
        }
        out.push(if rng.uniform() < 0.9 { '.' } else { '?' });
        if let Some(c) = out[start..].chars().next() {
            let upper = c.to_ascii_uppercase().to_string();
            out.replace_range(start..start + 1, &upper);
        }
    }
}

/// Deterministic pseudo-English text of at least `min_bytes` bytes.
pub fn synthetic_corpus(seed: u64, min_bytes: usize) -> Vec<u8> {
    let mut rng = Rng::seeded(seed);
    let lex = Lexicon::new(&mut rng);
    let mut out = String::with_capacity(min_bytes + 1024);
    while out.len() < min_bytes {
        let sentences = 2 + rng.below(5);
        for i in 0..sentences {
            if i > 0 {
                out.push(' ');
            }
            lex.sentence(&mut rng, &mut out);
        }
        out.push('\n');
    }
    out.into_bytes()
}

/// Corpus for byte-modeling runs: `LFACT_CORPUS` if set, else synthetic.
pub fn byte_corpus(min_bytes: usize) -> (Vec<u8>, String) {
    match std::env::var("LFACT_CORPUS") {
        Ok(p) => (std::fs::read(&p).expect("LFACT_CORPUS readable"), p),
        Err(_) => (synthetic_corpus(11, min_bytes), "synthetic".into()),
    }
}
