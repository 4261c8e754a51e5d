use std::fs;
use std::path::{Path, PathBuf};

use mindrisk_core::fixtures::{build_golden, GoldenPaths};

fn committed() -> GoldenPaths {
    GoldenPaths::new(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden"))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn regenerating_reproduces_committed_fixture() {
    let dir = tempfile::tempdir().unwrap();
    build_golden(dir.path()).unwrap();
    let ours = files_under(dir.path());
    assert_eq!(ours, files_under(&committed().root));
    for rel in ours {
        let a = fs::read(dir.path().join(&rel)).unwrap();
        let b = fs::read(committed().root.join(&rel)).unwrap();
        assert!(a == b, "{} differs; regenerate with `mindrisk fixture golden`", rel.display());
    }
}
