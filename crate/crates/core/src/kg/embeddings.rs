use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Vectors read from a `count dim` header followed by `name v1 … v_dim` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedEmbeddings {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

pub fn load_pretrained(path: impl AsRef<Path>) -> Result<PretrainedEmbeddings> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_pretrained(&text, path)
}

pub(crate) fn parse_pretrained(text: &str, path: &Path) -> Result<PretrainedEmbeddings> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "missing `count dim` header".into()))?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| err(1, format!("bad header: {e}")))?;
    let [count, dim] = nums[..] else {
        return Err(err(1, "header must be `count dim`".into()));
    };
    let mut vectors = HashMap::with_capacity(count);
    for (i, line) in lines {
        let mut fields = line.split_whitespace();
        let name = fields.next().expect("non-empty line");
        let values: Vec<f64> = fields
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(i + 1, format!("bad float: {e}")))?;
        if values.len() != dim {
            return Err(err(i + 1, format!("expected {dim} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err(i + 1, "non-finite value".into()));
        }
        vectors.insert(name.to_string(), values);
    }
    if vectors.len() != count {
        return Err(err(
            1,
            format!("header promises {count} vectors, found {}", vectors.len()),
        ));
    }
    Ok(PretrainedEmbeddings { dim, vectors })
}
