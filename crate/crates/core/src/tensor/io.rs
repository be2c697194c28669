//! Binary container for named tensors.
//!
//! Layout: a UTF-8 text header followed by a little-endian payload.
//!
//! ```text
//! MDSP-TENSORS 1
//! meta <key> <value to end of line>
//! entry <name> <param|buffer> <owner> <f32|f64> <d0,d1,...|scalar>
//! ...
//! end
//! <payload: each entry's values in header order, little-endian>
//! ```

use std::io::{BufRead, Write};

use crate::error::{MdspError, Result};

use super::store::{EntryKind, Owner, ParamStore};
use super::{DType, Element, Tensor};

const MAGIC: &str = "MDSP-TENSORS 1";

pub type Meta = Vec<(String, String)>;

pub fn write_store<T: Element, W: Write>(out: &mut W, store: &ParamStore<T>, meta: &[(String, String)]) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(MdspError::Format(format!("meta key {:?} is not writable", k)));
        }
        header.push_str(&format!("meta {} {}\n", k, v));
    }
    for e in store.entries() {
        if e.name.contains(char::is_whitespace) || e.name.is_empty() {
            return Err(MdspError::Format(format!("entry name {:?} is not writable", e.name)));
        }
        let dims = if e.tensor.shape().is_empty() {
            "scalar".to_string()
        } else {
            e.tensor.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        };
        header.push_str(&format!("entry {} {} {} {} {}\n", e.name, e.kind.name(), e.owner.name(), T::DTYPE.name(), dims));
    }
    header.push_str("end\n");
    out.write_all(header.as_bytes())?;
    let mut buf = Vec::new();
    for e in store.entries() {
        buf.clear();
        for &v in e.tensor.data() {
            match T::DTYPE {
                DType::F32 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Header {
    name: String,
    kind: EntryKind,
    owner: Owner,
    dtype: DType,
    shape: Vec<usize>,
}

fn parse_entry(line: &str) -> Result<Header> {
    let bad = || MdspError::Format(format!("malformed entry line {:?}", line));
    let parts: Vec<&str> = line.split(' ').collect();
    if parts.len() != 6 || parts[0] != "entry" {
        return Err(bad());
    }
    let kind = match parts[2] {
        "param" => EntryKind::Param,
        "buffer" => EntryKind::Buffer,
        _ => return Err(bad()),
    };
    let owner = Owner::parse(parts[3]).ok_or_else(bad)?;
    let dtype = DType::parse(parts[4]).ok_or_else(bad)?;
    let shape = if parts[5] == "scalar" {
        Vec::new()
    } else {
        parts[5].split(',').map(|d| d.parse::<usize>().map_err(|_| bad())).collect::<Result<_>>()?
    };
    Ok(Header { name: parts[1].to_string(), kind, owner, dtype, shape })
}

pub fn read_store<T: Element, R: BufRead>(input: &mut R) -> Result<(ParamStore<T>, Meta)> {
    let mut line = String::new();
    let next_line = |input: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        if input.read_line(line)? == 0 {
            return Err(MdspError::Format("unexpected end of header".into()));
        }
        if line.ends_with('\n') {
            line.pop();
        }
        Ok(())
    };
    next_line(input, &mut line)?;
    if line != MAGIC {
        return Err(MdspError::Format(format!("bad magic {:?}", line)));
    }
    let mut meta = Vec::new();
    let mut headers = Vec::new();
    loop {
        next_line(input, &mut line)?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.push((k.to_string(), v.to_string()));
        } else {
            headers.push(parse_entry(&line)?);
        }
    }
    let mut store = ParamStore::new();
    for h in headers {
        let n: usize = h.shape.iter().product();
        let mut raw = vec![0u8; n * h.dtype.size()];
        input
            .read_exact(&mut raw)
            .map_err(|_| MdspError::Format(format!("payload truncated in entry {}", h.name)))?;
        let data: Vec<T> = match h.dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| T::from_f64(f64::from_le_bytes(b.try_into().unwrap())))
                .collect(),
        };
        store.add(h.name, h.kind, h.owner, Tensor::new(h.shape, data)?);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(MdspError::Format("trailing bytes after payload".into()));
    }
    Ok((store, meta))
}
