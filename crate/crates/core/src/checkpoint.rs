//! Flat binary parameter container.
//!
//! Layout: 4-byte magic `MHM1`, then one record per tensor:
//! `u32` name length, name bytes (UTF-8), `u32` rank, `u64` extent per
//! dimension, then the raw little-endian `f64` data. Records run to end
//! of file. Round-trips are bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MHM1";

pub fn write<W: Write>(mut w: W, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(&MAGIC)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?;
        r.read_exact(&mut len4)?;
        let rank = u32::from_le_bytes(len4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e8 = [0u8; 8];
            r.read_exact(&mut e8)?;
            shape.push(u64::from_le_bytes(e8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut v8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut v8)?;
            data.push(f64::from_le_bytes(v8));
        }
        out.push((name.clone(), Tensor::from_vec(&shape, data).map_err(|e| {
            Error::Checkpoint(format!("record {name}: {e}"))
        })?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    write(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = File::open(path)?;
    read(BufReader::new(f))
}

/// Fill a mutable named-tensor view from loaded records. Every name must
/// be present with a matching shape, and no record may be left unused.
pub fn restore(records: Vec<(String, Tensor)>, targets: &mut [(String, &mut Tensor)]) -> Result<()> {
    if records.len() != targets.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file has {}",
            targets.len(),
            records.len()
        )));
    }
    for (name, loaded) in records {
        let slot = targets
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if slot.1.shape() != loaded.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} in file, {:?} expected",
                loaded.shape(),
                slot.1.shape()
            )));
        }
        *slot.1 = loaded;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(21);
        let a = Tensor::kaiming_uniform(&[3, 4], 12, &mut rng);
        let b = Tensor::kaiming_uniform(&[2, 2, 2, 2], 8, &mut rng);
        let mut buf = Vec::new();
        write(&mut buf, &[("a.w".to_string(), &a), ("b.k".to_string(), &b)]).unwrap();
        assert_eq!(&buf[..4], b"MHM1");
        let back = read(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.w");
        assert_eq!(back[0].1.shape(), a.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(bits(&back[1].1), bits(&b));

        // Writing the loaded tensors again reproduces the same bytes.
        let mut buf2 = Vec::new();
        let refs: Vec<(String, &Tensor)> = back.iter().map(|(n, t)| (n.clone(), t)).collect();
        write(&mut buf2, &refs).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE".to_vec();
        assert!(read(&buf[..]).is_err());
    }

    #[test]
    fn restore_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let mut buf = Vec::new();
        write(&mut buf, &[("w".to_string(), &a)]).unwrap();
        let records = read(&buf[..]).unwrap();
        let mut wrong = Tensor::zeros(&[3]);
        let mut targets = [("w".to_string(), &mut wrong)];
        assert!(restore(records, &mut targets).is_err());
    }
}
