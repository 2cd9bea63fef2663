//! The `MMT1` binary tensor format.
//!
//! Layout: magic `MMT1`, one dtype byte (0 = f32, 1 = f64), one rank byte,
//! `rank` little-endian `u32` dimensions, then the row-major little-endian
//! payload.

use std::path::Path;

use crate::encoders::{AudioTensor, ImageTensor, VideoTensor};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MMT1";

/// Sample rate assumed for audio tensor files, which carry no metadata.
pub const AUDIO_SAMPLE_RATE: u32 = 16_000;

pub fn encode<F: Real>(t: &Tensor<F>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Shape(format!("rank {} is too large", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * F::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.push(F::DTYPE.code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn header(bytes: &[u8]) -> Result<(DType, Vec<usize>, &[u8])> {
    let bad = |m: String| Error::Integrity(m);
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("not an MMT1 tensor file".into()));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad(format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    let body = &bytes[6..];
    if rank == 0 || body.len() < 4 * rank {
        return Err(bad(format!("truncated header for rank {rank}")));
    }
    let shape: Vec<usize> = body[..4 * rank]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let payload = &body[4 * rank..];
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    match n.and_then(|n| n.checked_mul(dtype.width())) {
        Some(len) if len == payload.len() && n != Some(0) => Ok((dtype, shape, payload)),
        _ => Err(bad(format!(
            "payload of {} bytes does not match shape {shape:?} of {dtype:?}",
            payload.len()
        ))),
    }
}

/// Decodes a tensor of the exact element type `F`.
pub fn decode<F: Real>(bytes: &[u8]) -> Result<Tensor<F>> {
    let (dtype, shape, payload) = header(bytes)?;
    if dtype != F::DTYPE {
        return Err(Error::Integrity(format!("tensor holds {dtype:?}, expected {:?}", F::DTYPE)));
    }
    let data = payload.chunks_exact(dtype.width()).map(F::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes a tensor of either element type into `f32`.
pub fn decode_as_f32(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (dtype, shape, payload) = header(bytes)?;
    let data = match dtype {
        DType::F32 => payload.chunks_exact(4).map(f32::read_le).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| f64::read_le(c) as f32).collect(),
    };
    Tensor::new(shape, data)
}

pub fn write_tensor<F: Real>(path: &Path, t: &Tensor<F>) -> Result<()> {
    std::fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor<F: Real>(path: &Path) -> Result<Tensor<F>> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn read_f32(path: &Path) -> Result<Tensor<f32>> {
    decode_as_f32(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// An image file holds `[H, W, 3]`.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let t = read_f32(path)?;
    match *t.shape() {
        [h, w, 3] => ImageTensor::new(h, w, t.into_data()),
        ref s => Err(Error::Shape(format!("{}: image tensor must be [H, W, 3], got {s:?}", path.display()))),
    }
}

/// A video file holds `[T, H, W, 3]`.
pub fn read_video(path: &Path) -> Result<VideoTensor> {
    let t = read_f32(path)?;
    match *t.shape() {
        [f, h, w, 3] => VideoTensor::new(f, h, w, t.into_data()),
        ref s => Err(Error::Shape(format!("{}: video tensor must be [T, H, W, 3], got {s:?}", path.display()))),
    }
}

/// An audio file holds `[N]` samples at [`AUDIO_SAMPLE_RATE`].
pub fn read_audio(path: &Path) -> Result<AudioTensor> {
    let t = read_f32(path)?;
    match *t.shape() {
        [_] => AudioTensor::new(t.into_data(), AUDIO_SAMPLE_RATE),
        ref s => Err(Error::Shape(format!("{}: audio tensor must be [N], got {s:?}", path.display()))),
    }
}

pub fn image_tensor(img: &ImageTensor) -> Tensor<f32> {
    Tensor::new(vec![img.height, img.width, 3], img.data.clone()).expect("valid image")
}

pub fn video_tensor(v: &VideoTensor) -> Tensor<f32> {
    Tensor::new(vec![v.frames, v.height, v.width, 3], v.data.clone()).expect("valid video")
}

pub fn audio_tensor(a: &AudioTensor) -> Tensor<f32> {
    Tensor::new(vec![a.samples.len()], a.samples.clone()).expect("valid audio")
}
