//! JSON Lines dataset files: one demonstration per line.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::Demonstration;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub fn dataset_to_string(data: &[Demonstration]) -> String {
    let mut out = String::new();
    for d in data {
        let line = serde_json::to_string(d).expect("demonstration serializes");
        writeln!(out, "{line}").expect("write to string");
    }
    out
}

pub fn dataset_save(path: &Path, data: &[Demonstration]) -> Result<()> {
    write_atomic(path, dataset_to_string(data).as_bytes())
}

pub fn dataset_parse(path: &Path, text: &str) -> Result<Vec<Demonstration>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn dataset_load(path: &Path) -> Result<Vec<Demonstration>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    dataset_parse(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndnum::Tensor2;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(dataset_load(&p).unwrap().is_empty());
    }

    #[test]
    fn missing_actions_names_line() {
        let text = "{\"obs\":[1.0],\"actions\":[[0.0]]}\n{\"obs\":[2.0]}\n";
        let err = dataset_parse(Path::new("d.jsonl"), text).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("actions"), "{msg}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let data = vec![Demonstration {
            obs: vec![0.1, -1.0 / 3.0],
            actions: Tensor2::from_rows(&[vec![std::f64::consts::PI, 1e-300]]).unwrap(),
        }];
        dataset_save(&a, &data).unwrap();
        let loaded = dataset_load(&a).unwrap();
        assert_eq!(loaded, data);
        dataset_save(&b, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            obs in proptest::collection::vec(-1e6..1e6f64, 0..5),
            rows in proptest::collection::vec(proptest::collection::vec(-1e3..1e3f64, 2), 1..5),
        ) {
            let data = vec![Demonstration { obs, actions: Tensor2::from_rows(&rows).unwrap() }];
            let text = dataset_to_string(&data);
            prop_assert_eq!(dataset_parse(Path::new("x"), &text).unwrap(), data);
        }
    }
}
