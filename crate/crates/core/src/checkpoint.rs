//! Flat checkpoint format.
//!
//! ```text
//! patchattn-checkpoint v1\n
//! config_hash <hex>\n
//! records <n>\n
//! then per record:
//! <name>\t<d0>x<d1>x...\n
//! <product(dims) little-endian f32 values>
//! ```

use crate::error::{Error, Result};
use diffcore::{ParamSet, Tensor};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &str = "patchattn-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: ParamSet<f32>,
}

pub fn write_to<W: Write>(mut w: W, config_hash: &str, params: &ParamSet<f32>) -> std::io::Result<()> {
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "config_hash {config_hash}")?;
    writeln!(w, "records {}", params.len())?;
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(w, "{name}\t{}", dims.join("x"))?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save(path: &Path, config_hash: &str, params: &ParamSet<f32>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_to(BufWriter::new(file), config_hash, params).map_err(|e| Error::io(path, e))
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    if !line.ends_with('\n') {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    line.pop();
    Ok(line)
}

pub fn read_from<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = BufReader::new(r);
    if read_line(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("not a patchattn checkpoint".into()));
    }
    let field = |line: String, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|s| s.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| Error::Checkpoint(format!("expected `{key}` line, got {line:?}")))
    };
    let config_hash = field(read_line(&mut r)?, "config_hash")?;
    let records: usize = field(read_line(&mut r)?, "records")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad record count: {e}")))?;
    let mut params = ParamSet::new();
    for _ in 0..records {
        let line = read_line(&mut r)?;
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| Error::Checkpoint(format!("bad record header {line:?}")))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Checkpoint(format!("bad shape {dims:?}: {e}")))?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        params.push(name, tensor);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last record".into()));
    }
    Ok(Checkpoint { config_hash, params })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push(
            "a.kernel",
            Tensor::new(vec![2, 1, 1, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e7]).unwrap(),
        );
        p.push("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut buf = Vec::new();
        write_to(&mut buf, "abc123", &sample()).unwrap();
        let ck = read_from(buf.as_slice()).unwrap();
        assert_eq!(ck.config_hash, "abc123");
        assert_eq!(ck.params.names(), sample().names());
        for (a, b) in ck.params.tensors().iter().zip(sample().tensors()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn header_is_plain_text() {
        let mut buf = Vec::new();
        write_to(&mut buf, "h", &sample()).unwrap();
        assert!(buf.starts_with(b"patchattn-checkpoint v1\nconfig_hash h\nrecords 2\na.kernel\t2x1x1x2\n"));
        assert_eq!(buf.len(), 65 + 16 + "b\t3\n".len() + 12);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut buf = Vec::new();
        write_to(&mut buf, "h", &sample()).unwrap();
        assert!(read_from(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_from(extra.as_slice()).is_err());
        assert!(read_from(&b"something else\n"[..]).is_err());
    }
}
