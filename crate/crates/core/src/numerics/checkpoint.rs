//! Text checkpoint of named tensors.
//!
//! ```text
//! # msrf-params v1
//! sfc.w,8x32,0.01,-0.2,...
//! ```

use std::io::{BufRead, Write};

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "# msrf-params v1";

pub fn write_checkpoint<W: Write>(mut out: W, params: &[(String, Tensor)]) -> Result<()> {
    writeln!(out, "{}", CHECKPOINT_HEADER)?;
    for (name, t) in params {
        if name.contains(',') {
            return Err(Error::Parse { line: 0, msg: format!("parameter name {:?} contains a comma", name) });
        }
        write!(out, "{},{}", name, t.shape_string())?;
        for v in t.data() {
            write!(out, ",{}", v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Vec<(String, Tensor)>> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == CHECKPOINT_HEADER => {}
        Some(Ok(h)) => return Err(Error::Parse { line: 1, msg: format!("bad checkpoint header {:?}", h) }),
        Some(Err(e)) => return Err(e.into()),
        None => return Err(Error::Parse { line: 1, msg: "empty checkpoint".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let name = fields.next().unwrap_or_default().to_string();
        let shape_field = fields
            .next()
            .ok_or_else(|| Error::Parse { line: lineno, msg: "missing shape".into() })?;
        let shape = shape_field
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: lineno, msg: format!("bad shape {:?}: {}", shape_field, e) })?;
        let data = fields
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: lineno, msg: format!("bad value: {}", e) })?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        out.push((name, t));
    }
    Ok(out)
}
