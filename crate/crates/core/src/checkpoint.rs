//! Named-tensor checkpoints: a sequence of `(u16 name length, UTF-8 name, TNSR record)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{read_tnsr, write_tnsr, DType, Tensor};

pub fn write_checkpoint<'a, W, I>(out: &mut W, entries: I, dtype: DType) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    for (name, tensor) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("parameter name too long: {} bytes", name.len())))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        write_tnsr(out, tensor, dtype)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut entries = Vec::new();
    loop {
        let mut len = [0u8; 2];
        match input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Format(format!("parameter name: {e}")))?;
        let (tensor, _) = read_tnsr(input)?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn save_store(path: &Path, store: &ParamStore, dtype: DType) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, store.iter(), dtype)?;
    out.flush()?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<ParamStore> {
    let mut input = BufReader::new(File::open(path)?);
    let mut store = ParamStore::new();
    for (name, tensor) in read_checkpoint(&mut input)? {
        store.add(name, tensor)?;
    }
    Ok(store)
}
