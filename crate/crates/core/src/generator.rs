//! The frozen server-side generator: a mapping network from noise into a
//! bounded latent domain, and a synthesis network from latents to images.
//! Built synthetically here; the KTLW/KTLI bridge files let an external
//! generator substitute for the synthesis step.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Module, ModuleBuilder};
use crate::rng::{normal_f64, StreamKey};
use crate::tensor::{re, Real, Tensor};

pub const KTLW_MAGIC: &[u8; 4] = b"KTLW";
pub const KTLI_MAGIC: &[u8; 4] = b"KTLI";
pub const BRIDGE_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct FrozenGenerator<E: Real> {
    mapping: Module<E>,
    synthesis: Module<E>,
    noise_dim: usize,
    latent_dim: usize,
    image_dim: usize,
}

/// One class's generated image together with the latent centroid that
/// produced it.
#[derive(Debug, Clone)]
pub struct ImageVectorPair<E: Real> {
    pub class: u32,
    pub latent: Vec<E>,
    pub image: Vec<E>,
    pub round: usize,
}

/// Init gain on the mapping network. Driving its tanh into saturation gives
/// the latent domain a pronounced multi-modal geometry, so arbitrary vectors
/// are visibly invalid and alignment has real work to do.
const MAPPING_GAIN: f64 = 3.0;

/// Builds the synthetic frozen generator. The mapping network's saturated
/// tanh keeps the latent domain bounded and structured, so random vectors
/// elsewhere in space are not valid latents; the synthesis network's final
/// tanh bounds image elements in (-1, 1).
pub fn build_synthetic_generator<E: Real>(
    noise_dim: usize,
    latent_dim: usize,
    image_dim: usize,
    seed: u64,
) -> Result<FrozenGenerator<E>> {
    if noise_dim == 0 || latent_dim == 0 || image_dim == 0 {
        return Err(Error::InvalidArgument(
            "generator dimensions must be positive".into(),
        ));
    }
    let key = StreamKey::new(seed).tag("generator");
    let mut mapping = ModuleBuilder::new("gen.mapping", key.tag("mapping"))
        .fc(noise_dim, latent_dim)
        .tanh()
        .fc(latent_dim, latent_dim)
        .build(true);
    // Saturate only the first layer: the latent domain keeps its multi-modal
    // shape while the output layer holds latent norms at an ordinary scale.
    let gain = re::<E>(MAPPING_GAIN);
    mapping.visit_params_mut(|name, tensor| {
        if name.contains(".0.") {
            for v in tensor.data_mut() {
                *v = *v * gain;
            }
        }
    });
    let synthesis = ModuleBuilder::new("gen.synthesis", key.tag("synthesis"))
        .fc(latent_dim, 2 * image_dim)
        .tanh()
        .fc(2 * image_dim, image_dim)
        .tanh()
        .build(true);
    Ok(FrozenGenerator {
        mapping,
        synthesis,
        noise_dim,
        latent_dim,
        image_dim,
    })
}

impl<E: Real> FrozenGenerator<E> {
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    /// Standard-normal noise pushed through the frozen mapping network; the
    /// resulting rows define the valid latent domain.
    pub fn sample_latents(&self, count: usize, key: StreamKey) -> Result<Tensor<E>> {
        if count == 0 {
            return Ok(Tensor::zeros(vec![0, self.latent_dim]));
        }
        let noise = self.sample_noise(count, key)?;
        self.mapping.apply_eval(&noise)
    }

    /// The raw noise draws, exposed for distribution checks.
    pub fn sample_noise(&self, count: usize, key: StreamKey) -> Result<Tensor<E>> {
        let mut rng = key.rng();
        let data: Vec<E> = (0..count * self.noise_dim)
            .map(|_| re(normal_f64(&mut rng)))
            .collect();
        Tensor::new(vec![count, self.noise_dim], data)
    }

    /// One image row per latent row, deterministic.
    pub fn synthesize(&self, latents: &Tensor<E>) -> Result<Tensor<E>> {
        if latents.cols() != self.latent_dim {
            return Err(Error::shape(
                "synthesize",
                format!("latent dim {}", self.latent_dim),
                format!("{}", latents.cols()),
            ));
        }
        if latents.rows() == 0 {
            return Ok(Tensor::zeros(vec![0, self.image_dim]));
        }
        self.synthesis.apply_eval(latents)
    }

    /// Order-stable hash over both sub-networks, for frozen-contract checks.
    pub fn fingerprint(&self) -> u64 {
        self.mapping.fingerprint() ^ self.synthesis.fingerprint().rotate_left(17)
    }
}

fn write_bridge_file<E: Real>(
    path: &Path,
    magic: &[u8; 4],
    rows: &Tensor<E>,
) -> Result<()> {
    let mut bytes = Vec::with_capacity(28 + rows.len() * 4);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&BRIDGE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(rows.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(rows.cols() as u64).to_le_bytes());
    for v in rows.data() {
        bytes.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_bridge_file<E: Real>(path: &Path, magic: &[u8; 4]) -> Result<Tensor<E>> {
    let display = path.display().to_string();
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut cursor = 0usize;
    let mut take = |len: usize| -> Result<&[u8]> {
        if cursor + len > bytes.len() {
            return Err(Error::file(&display, "truncated file"));
        }
        let slice = &bytes[cursor..cursor + len];
        cursor += len;
        Ok(slice)
    };
    if take(4)? != magic {
        return Err(Error::file(&display, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != BRIDGE_VERSION {
        return Err(Error::file(&display, format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let width = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut data = Vec::with_capacity(count * width);
    for _ in 0..count * width {
        let v = f32::from_le_bytes(take(4)?.try_into().unwrap());
        data.push(re::<E>(v as f64));
    }
    if cursor != bytes.len() {
        return Err(Error::file(&display, "trailing bytes"));
    }
    Tensor::new(vec![count, width], data)
}

/// Writes a [count, H] latent batch as a KTLW file.
pub fn bridge_export_latents<E: Real>(latents: &Tensor<E>, path: &Path) -> Result<()> {
    write_bridge_file(path, KTLW_MAGIC, latents)
}

/// Reads a KTLW latent file, validating the latent width.
pub fn bridge_import_latents<E: Real>(path: &Path, latent_dim: usize) -> Result<Tensor<E>> {
    let t = read_bridge_file::<E>(path, KTLW_MAGIC)?;
    if t.cols() != latent_dim {
        return Err(Error::file(
            path.display().to_string(),
            format!("latent dim {} does not match configured {}", t.cols(), latent_dim),
        ));
    }
    Ok(t)
}

/// Writes a [count, d_img] image batch as a KTLI file.
pub fn bridge_export_images<E: Real>(images: &Tensor<E>, path: &Path) -> Result<()> {
    write_bridge_file(path, KTLI_MAGIC, images)
}

/// Reads a KTLI image file, validating that the count matches the latents it
/// answers and that the image width matches the experiment.
pub fn bridge_import_images<E: Real>(
    path: &Path,
    expected_count: usize,
    image_dim: usize,
) -> Result<Tensor<E>> {
    let t = read_bridge_file::<E>(path, KTLI_MAGIC)?;
    if t.rows() != expected_count {
        return Err(Error::file(
            path.display().to_string(),
            format!("image count {} does not match exported latent count {expected_count}", t.rows()),
        ));
    }
    if t.cols() != image_dim {
        return Err(Error::file(
            path.display().to_string(),
            format!("image dim {} does not match configured {image_dim}", t.cols()),
        ));
    }
    Ok(t)
}
