//! Binary kernel files.
//!
//! Layout, all little endian:
//! `b"NLKERNEL"`, version `u32`, dim `u32`, cells per axis `u32`,
//! periodic `u8`, three zero bytes, box length `f64`, order `s` `f64`,
//! then the `M x M` table as row-major `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::TabulatedKernel;
use crate::error::{Error, Result};
use crate::grid::Grid;

const MAGIC: &[u8; 8] = b"NLKERNEL";
const VERSION: u32 = 1;

pub fn write_kernel(k: &TabulatedKernel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let g = k.grid();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(g.dim() as u32).to_le_bytes())?;
    w.write_all(&(g.cells_per_axis() as u32).to_le_bytes())?;
    w.write_all(&[u8::from(g.is_periodic()), 0, 0, 0])?;
    w.write_all(&g.box_length().to_le_bytes())?;
    w.write_all(&k.s().to_le_bytes())?;
    for v in k.entries() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    Ok(buf)
}

pub fn read_kernel(path: impl AsRef<Path>) -> Result<TabulatedKernel> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    if &take::<8>(&mut r)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(take(&mut r)?) as usize;
    let n = u32::from_le_bytes(take(&mut r)?) as usize;
    let flags = take::<4>(&mut r)?;
    let periodic = match flags[0] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad periodic flag {b}"))),
    };
    let length = f64::from_le_bytes(take(&mut r)?);
    let s = f64::from_le_bytes(take(&mut r)?);
    let grid = Grid::new(dim, n, length, periodic).map_err(|e| Error::Format(e.to_string()))?;
    let m = grid.cell_count();
    let mut bytes = Vec::with_capacity(m * m * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != m * m * 8 {
        return Err(Error::Format(format!(
            "expected {} table bytes, found {}",
            m * m * 8,
            bytes.len()
        )));
    }
    let entries = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    TabulatedKernel::from_entries(grid, s, entries, format!("file:{}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{tabulate, KernelSpec, KernelVariant, TabulatedSource};

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join(format!("nlk-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("k.bin");
        let g = Grid::periodic(2, 6, 1.5).unwrap();
        let k = tabulate(&KernelSpec::new(KernelVariant::Stripes { width: 0.5 }, 0.3, 2.0).unwrap(), &g).unwrap();
        write_kernel(&k, &path).unwrap();
        let back = read_kernel(&path).unwrap();
        assert_eq!(back.entries(), k.entries());
        assert_eq!(back.grid(), k.grid());
        assert_eq!(back.s(), 0.3);

        let spec = KernelSpec::new(
            KernelVariant::Tabulated {
                source: TabulatedSource::File(path.clone()),
            },
            0.3,
            1.0,
        )
        .unwrap();
        assert_eq!(tabulate(&spec, &g).unwrap().entries(), k.entries());
        let other = Grid::periodic(2, 6, 1.0).unwrap();
        assert_eq!(tabulate(&spec, &other), Err(Error::GridMismatch));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_kernel(&path), Err(Error::Format(_))));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_kernel(&path), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
