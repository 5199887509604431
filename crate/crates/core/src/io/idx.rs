//! IDX image-file parser (the MNIST container format). Big-endian throughout,
//! per the published format definition.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parse an IDX byte stream. Unsigned-byte payloads are scaled to `[0, 1]`.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!(
            "idx: truncated header, {} bytes at offset 0",
            bytes.len()
        )));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format(
            "idx: bad magic, first two bytes must be zero (offset 0)".into(),
        ));
    }
    let type_code = bytes[2];
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::Format("idx: zero rank (offset 3)".into()));
    }
    let header_len = 4 + 4 * rank;
    if bytes.len() < header_len {
        return Err(Error::Format(format!(
            "idx: truncated extents, need {header_len} header bytes, have {} (offset 4)",
            bytes.len()
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for d in 0..rank {
        let off = 4 + 4 * d;
        let e = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if e == 0 {
            return Err(Error::Format(format!("idx: zero extent (offset {off})")));
        }
        shape.push(e);
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[header_len..];
    let data = match type_code {
        0x08 => {
            if payload.len() < count {
                return Err(Error::Format(format!(
                    "idx: payload truncated, need {count} bytes, have {} (offset {header_len})",
                    payload.len()
                )));
            }
            payload[..count].iter().map(|&b| b as f64 / 255.0).collect()
        }
        0x0d => {
            // 32-bit float payload, unscaled
            if payload.len() < 4 * count {
                return Err(Error::Format(format!(
                    "idx: payload truncated, need {} bytes, have {} (offset {header_len})",
                    4 * count,
                    payload.len()
                )));
            }
            payload[..4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_be_bytes(c.try_into().unwrap()) as f64)
                .collect()
        }
        other => {
            return Err(Error::Format(format!(
                "idx: unsupported type code {other:#04x} (offset 2)"
            )))
        }
    };
    Tensor::new(shape, data)
}

/// Serialize a tensor of `[0, 1]` values as an unsigned-byte IDX stream.
pub fn write_idx_u8(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > 255 {
        return Err(Error::Format("idx: rank exceeds 255".into()));
    }
    let mut out = vec![0u8, 0, 0x08, t.rank() as u8];
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_be_bytes());
    }
    for &v in t.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(
                "idx: unsigned-byte export needs values in [0, 1]".into(),
            ));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

/// Area-averaging downsample of a stack of square images `[N, H, W]` to
/// `[N, h, w]`. Source extents must be divisible by the destination's.
pub fn downsample_area(images: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "downsample expects [N, H, W], got {shape:?}"
        )));
    }
    let (n, src_h, src_w) = (shape[0], shape[1], shape[2]);
    if src_h % h != 0 || src_w % w != 0 {
        return Err(Error::Dimension(format!(
            "downsample: {src_h}x{src_w} not divisible by {h}x{w}"
        )));
    }
    let (fh, fw) = (src_h / h, src_w / w);
    let mut out = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let base = i * src_h * src_w;
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0;
                for dy in 0..fh {
                    for dx in 0..fw {
                        acc += images.data()[base + (oy * fh + dy) * src_w + ox * fw + dx];
                    }
                }
                out.push(acc / (fh * fw) as f64);
            }
        }
    }
    Tensor::new(vec![n, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank1_bytes_scale_to_unit_interval() {
        // header 00 00 08 01, extent 3, payload [0, 128, 255]
        let bytes = [0u8, 0, 0x08, 1, 0, 0, 0, 3, 0, 128, 255];
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[3]);
        assert_eq!(t.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn rank3_shape_preserved() {
        let mut bytes = vec![0u8, 0, 0x08, 3];
        for e in [2u32, 4, 4] {
            bytes.extend_from_slice(&e.to_be_bytes());
        }
        bytes.extend(std::iter::repeat(7u8).take(32));
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 4, 4]);
        assert!(t.data().iter().all(|&v| (v - 7.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = vec![0u8, 0, 0x08, 1, 0, 0, 0, 5];
        bytes.extend_from_slice(&[1, 2, 3]); // 3 < 5
        let err = parse_idx(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_and_type_rejected() {
        assert!(parse_idx(&[1, 0, 0x08, 1, 0, 0, 0, 1, 9]).is_err());
        assert!(parse_idx(&[0, 0, 0x0e, 1, 0, 0, 0, 1, 9]).is_err());
    }

    #[test]
    fn u8_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let bytes = write_idx_u8(&t).unwrap();
        let back = parse_idx(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
    }

    #[test]
    fn area_downsample_averages_blocks() {
        // 4x4 image of row indices -> 2x2 blocks average pairs of rows
        let data: Vec<f64> = (0..16).map(|i| (i / 4) as f64).collect();
        let img = Tensor::new(vec![1, 4, 4], data).unwrap();
        let small = downsample_area(&img, 2, 2).unwrap();
        assert_eq!(small.shape(), &[1, 2, 2]);
        assert_eq!(small.data(), &[0.5, 0.5, 2.5, 2.5]);
        assert!(downsample_area(&img, 3, 2).is_err());
    }
}
