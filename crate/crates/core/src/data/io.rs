//! `.vclip` containers and PPM frame export.
//!
//! `.vclip` layout, little-endian:
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 4     | magic `VCLP`                           |
//! | 1     | version, currently 1                   |
//! | 1     | dtype: 0 = u8 pixels, 1 = f32 latents  |
//! | 16    | `F, H, W, C` as u32                    |
//! | ...   | frame-major samples, `(f, y, x, c)`    |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array4;

use crate::error::{Result, VdtError};
use crate::VideoClip;

pub const VCLIP_MAGIC: &[u8; 4] = b"VCLP";
pub const VCLIP_VERSION: u8 = 1;
pub const VCLIP_HEADER_LEN: usize = 4 + 1 + 1 + 16;

/// Raw `.vclip` payload.
#[derive(Clone, Debug, PartialEq)]
pub enum ClipData {
    U8(Array4<u8>),
    F32(Array4<f32>),
}

impl ClipData {
    /// Quantise a `[0, 1]` clip to bytes.
    pub fn from_video(x: &VideoClip) -> Self {
        ClipData::U8(x.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    }

    pub fn from_latent(z: &Array4<f64>) -> Self {
        ClipData::F32(z.mapv(|v| v as f32))
    }

    /// Pixels are rescaled to `[0, 1]`; latents are widened unchanged.
    pub fn to_f64(&self) -> Array4<f64> {
        match self {
            ClipData::U8(a) => a.mapv(|v| v as f64 / 255.0),
            ClipData::F32(a) => a.mapv(f64::from),
        }
    }

    pub fn dim(&self) -> (usize, usize, usize, usize) {
        match self {
            ClipData::U8(a) => a.dim(),
            ClipData::F32(a) => a.dim(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (f, h, w, c) = self.dim();
        let mut out = Vec::with_capacity(VCLIP_HEADER_LEN + f * h * w * c * 4);
        out.extend_from_slice(VCLIP_MAGIC);
        out.push(VCLIP_VERSION);
        out.push(match self {
            ClipData::U8(_) => 0,
            ClipData::F32(_) => 1,
        });
        for d in [f, h, w, c] {
            let d = u32::try_from(d)
                .map_err(|_| VdtError::Format(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self {
            ClipData::U8(a) => out.extend(a.iter()),
            ClipData::F32(a) => {
                for v in a.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < VCLIP_HEADER_LEN {
            return Err(VdtError::Format(format!(
                "truncated header: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[..4] != VCLIP_MAGIC {
            return Err(VdtError::Format("bad magic".into()));
        }
        if bytes[4] != VCLIP_VERSION {
            return Err(VdtError::Format(format!(
                "unsupported version {}",
                bytes[4]
            )));
        }
        let dtype = bytes[5];
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let at = 6 + 4 * i;
            *d = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        }
        let [f, h, w, c] = dims;
        let n = f
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| VdtError::Format("dimensions overflow".into()))?;
        let body = &bytes[VCLIP_HEADER_LEN..];
        let width = match dtype {
            0 => 1,
            1 => 4,
            other => return Err(VdtError::Format(format!("unknown dtype {other}"))),
        };
        if body.len() != n * width {
            return Err(VdtError::Format(format!(
                "payload has {} bytes, header implies {}",
                body.len(),
                n * width
            )));
        }
        let shape = (f, h, w, c);
        Ok(match dtype {
            0 => {
                ClipData::U8(Array4::from_shape_vec(shape, body.to_vec()).expect("length checked"))
            }
            _ => {
                let vals = body
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                ClipData::F32(Array4::from_shape_vec(shape, vals).expect("length checked"))
            }
        })
    }
}

/// Write through a sibling temporary file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_vclip(path: impl AsRef<Path>, clip: &ClipData) -> Result<()> {
    write_atomic(path.as_ref(), &clip.to_bytes()?)
}

pub fn read_vclip(path: impl AsRef<Path>) -> Result<ClipData> {
    ClipData::from_bytes(&fs::read(path)?)
}

/// One binary PPM per frame, `frame_0000.ppm`, ... Returns the paths written.
pub fn export_frames(clip: &VideoClip, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let (f, h, w, c) = clip.dim();
    if c != 3 {
        return Err(VdtError::ShapeMismatch {
            expected: vec![f, h, w, 3],
            got: clip.shape().to_vec(),
        });
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let ClipData::U8(bytes) = ClipData::from_video(clip) else {
        unreachable!("from_video yields bytes")
    };
    let mut paths = Vec::with_capacity(f);
    for (i, frame) in bytes.outer_iter().enumerate() {
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend(frame.iter());
        let path = dir.join(format!("frame_{i:04}.ppm"));
        write_atomic(&path, &out)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn vclip_round_trip_bit_exact(f in 1usize..4, h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u32>()) {
            let n = f * h * w * c;
            let floats: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff)).collect();
            let z = ClipData::F32(Array4::from_shape_vec((f, h, w, c), floats).unwrap());
            prop_assert_eq!(ClipData::from_bytes(&z.to_bytes().unwrap()).unwrap(), z);
            let bytes: Vec<u8> = (0..n).map(|i| (i as u32 ^ seed) as u8).collect();
            let x = ClipData::U8(Array4::from_shape_vec((f, h, w, c), bytes).unwrap());
            prop_assert_eq!(ClipData::from_bytes(&x.to_bytes().unwrap()).unwrap(), x);
        }
    }

    #[test]
    fn header_layout() {
        let x = ClipData::U8(Array4::zeros((4, 16, 16, 3)));
        let bytes = x.to_bytes().unwrap();
        assert_eq!(VCLIP_HEADER_LEN, 22);
        assert_eq!(bytes.len(), 22 + 3072);
        assert_eq!(&bytes[..6], b"VCLP\x01\x00");
        assert_eq!(&bytes[6..10], &4u32.to_le_bytes());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let good = ClipData::F32(Array4::zeros((1, 2, 2, 1)))
            .to_bytes()
            .unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            ClipData::from_bytes(&bad),
            Err(VdtError::Format(_))
        ));
        assert!(ClipData::from_bytes(&good[..good.len() - 1]).is_err());
        assert!(ClipData::from_bytes(&good[..10]).is_err());
        let mut bad = good;
        bad[5] = 7;
        assert!(ClipData::from_bytes(&bad).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vclip");
        let x = ClipData::from_latent(&Array4::from_elem((2, 3, 3, 4), -0.25));
        write_vclip(&path, &x).unwrap();
        assert_eq!(read_vclip(&path).unwrap(), x);
        assert_eq!(read_vclip(&path).unwrap().to_f64()[[1, 2, 2, 3]], -0.25);
    }

    /// Independent PPM parser used as the oracle.
    fn parse_ppm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
        }
        assert_eq!(fields[0], "P6");
        assert_eq!(fields[3], "255");
        (
            fields[1].parse().unwrap(),
            fields[2].parse().unwrap(),
            bytes[pos + 1..].to_vec(),
        )
    }

    #[test]
    fn ppm_export() {
        let dir = tempfile::tempdir().unwrap();
        let clip = VideoClip::from_shape_fn((3, 4, 5, 3), |(f, y, x, c)| {
            ((f + y * 5 + x + c) % 7) as f64 / 6.0
        });
        let paths = export_frames(&clip, dir.path()).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[2].ends_with("frame_0002.ppm"));
        let (w, h, data) = parse_ppm(&fs::read(&paths[1]).unwrap());
        assert_eq!((w, h, data.len()), (5, 4, 60));
        for (i, &b) in data.iter().enumerate() {
            let (y, x, c) = (i / 15, (i / 3) % 5, i % 3);
            assert!((b as f64 / 255.0 - clip[[1, y, x, c]]).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let black = export_frames(&VideoClip::zeros((1, 2, 2, 3)), dir.path().join("b")).unwrap();
        let (_, _, data) = parse_ppm(&fs::read(&black[0]).unwrap());
        assert!(data.iter().all(|&b| b == 0));
        assert!(export_frames(&VideoClip::zeros((1, 2, 2, 1)), dir.path()).is_err());
    }
}
