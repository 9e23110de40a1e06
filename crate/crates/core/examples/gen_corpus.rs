//! Regenerate the shipped mock corpus:
//! `cargo run -p prefgen-core --example gen_corpus -- data/mock_problems.jsonl 500`

use prefgen_core::backend::MockWorldSpec;

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| "data/mock_problems.jsonl".to_string());
    let n: usize = args
        .next()
        .map(|s| s.parse().expect("count"))
        .unwrap_or(500);
    let spec = MockWorldSpec {
        n_problems: n,
        ..Default::default()
    };
    spec.write_corpus(std::path::Path::new(&path))
        .expect("write corpus");
    println!("wrote {n} problems to {path}");
}
