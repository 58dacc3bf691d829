//! Fixed concept/class anchors and the trainable patch embedder.
//!
//! Anchor vectors stand in for text-encoder embeddings: each name maps to a
//! deterministic unit Gaussian seeded by `hash(domain, name, seed)`, so a
//! registry rebuilt from names and the global seed is bitwise identical.
//! Anchors are never trained; only the patch embedder carries parameters.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

/// Flat H×W×C image, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Validation(format!(
                "image data length {} does not match {h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Image { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn pixel(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f32 {
        &mut self.data[(y * self.w + x) * self.c + ch]
    }
}

/// Fixed unit-norm embedding of a concept name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptAnchor {
    pub id: usize,
    pub name: String,
    pub vector: Vec<f32>,
    pub introduced_in: usize,
}

/// Fixed unit-norm embedding of a class name. Never trained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAnchor {
    pub id: usize,
    pub name: String,
    pub vector: Vec<f32>,
}

fn mix_hash(domain: &str, name: &str, seed: u64) -> u64 {
    // FNV-1a over domain, name, and seed bytes; stable across runs.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in domain
        .as_bytes()
        .iter()
        .chain([0u8].iter())
        .chain(name.as_bytes())
        .chain([0u8].iter())
        .chain(seed.to_le_bytes().iter())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller keeps the generator dependency-free and reproducible.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn seeded_unit_vector(domain: &str, name: &str, seed: u64, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(mix_hash(domain, name, seed));
    let raw: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    raw.into_iter().map(|v| (v / norm) as f32).collect()
}

/// Deterministic unit vector for a concept name.
pub fn embed_concept(name: &str, seed: u64, dim: usize) -> Result<Vec<f32>> {
    if name.is_empty() {
        return Err(Error::Validation("concept name must be non-empty".into()));
    }
    Ok(seeded_unit_vector("concept", name, seed, dim))
}

/// Deterministic unit vector for a class name; separate hash domain, so a
/// class and a concept sharing a name get different vectors.
pub fn embed_class(name: &str, seed: u64, dim: usize) -> Result<Vec<f32>> {
    if name.is_empty() {
        return Err(Error::Validation("class name must be non-empty".into()));
    }
    Ok(seeded_unit_vector("class", name, seed, dim))
}

/// Append-only store of concept and class anchors.
#[derive(Debug, Clone)]
pub struct Registry {
    dim: usize,
    seed: u64,
    concepts: Vec<ConceptAnchor>,
    classes: Vec<ClassAnchor>,
    concept_index: HashMap<String, usize>,
    class_index: HashMap<String, usize>,
}

impl Registry {
    pub fn new(dim: usize, seed: u64) -> Self {
        Registry {
            dim,
            seed,
            concepts: Vec::new(),
            classes: Vec::new(),
            concept_index: HashMap::new(),
            class_index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn concepts(&self) -> &[ConceptAnchor] {
        &self.concepts
    }

    pub fn classes(&self) -> &[ClassAnchor] {
        &self.classes
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn concept_id(&self, name: &str) -> Option<usize> {
        self.concept_index.get(name).copied()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_index.get(name).copied()
    }

    /// Append new concepts; ids are dense and existing entries never move.
    pub fn extend_concepts(&mut self, names: &[String], experience: usize) -> Result<()> {
        for name in names {
            if self.concept_index.contains_key(name) {
                return Err(Error::Duplicate(format!("concept '{name}'")));
            }
        }
        for name in names {
            let id = self.concepts.len();
            let vector = embed_concept(name, self.seed, self.dim)?;
            self.concept_index.insert(name.clone(), id);
            self.concepts.push(ConceptAnchor {
                id,
                name: name.clone(),
                vector,
                introduced_in: experience,
            });
        }
        Ok(())
    }

    /// Append concepts with externally supplied vectors (anchor files).
    pub fn extend_concepts_with_vectors(
        &mut self,
        entries: &[(String, Vec<f32>)],
        experience: usize,
    ) -> Result<()> {
        for (name, v) in entries {
            if self.concept_index.contains_key(name) {
                return Err(Error::Duplicate(format!("concept '{name}'")));
            }
            validate_unit_norm(name, v, self.dim)?;
        }
        for (name, v) in entries {
            let id = self.concepts.len();
            self.concept_index.insert(name.clone(), id);
            self.concepts.push(ConceptAnchor {
                id,
                name: name.clone(),
                vector: v.clone(),
                introduced_in: experience,
            });
        }
        Ok(())
    }

    /// Re-insert a concept with an explicit vector (checkpoint restore).
    pub fn restore_concept(
        &mut self,
        name: &str,
        vector: Vec<f32>,
        introduced_in: usize,
    ) -> Result<()> {
        if self.concept_index.contains_key(name) {
            return Err(Error::Duplicate(format!("concept '{name}'")));
        }
        validate_unit_norm(name, &vector, self.dim)?;
        let id = self.concepts.len();
        self.concept_index.insert(name.to_string(), id);
        self.concepts.push(ConceptAnchor {
            id,
            name: name.to_string(),
            vector,
            introduced_in,
        });
        Ok(())
    }

    /// Re-insert a class with an explicit vector (checkpoint restore).
    pub fn restore_class(&mut self, name: &str, vector: Vec<f32>) -> Result<()> {
        if self.class_index.contains_key(name) {
            return Err(Error::Duplicate(format!("class '{name}'")));
        }
        validate_unit_norm(name, &vector, self.dim)?;
        let id = self.classes.len();
        self.class_index.insert(name.to_string(), id);
        self.classes.push(ClassAnchor {
            id,
            name: name.to_string(),
            vector,
        });
        Ok(())
    }

    pub fn extend_classes(&mut self, names: &[String]) -> Result<()> {
        for name in names {
            if self.class_index.contains_key(name) {
                return Err(Error::Duplicate(format!("class '{name}'")));
            }
        }
        for name in names {
            let id = self.classes.len();
            let vector = embed_class(name, self.seed, self.dim)?;
            self.class_index.insert(name.clone(), id);
            self.classes.push(ClassAnchor {
                id,
                name: name.clone(),
                vector,
            });
        }
        Ok(())
    }

    /// Concept anchors stacked `[n_concepts, d]`, registry order.
    pub fn concept_matrix(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.concepts.len() * self.dim);
        for a in &self.concepts {
            data.extend_from_slice(&a.vector);
        }
        Tensor::constant(&[self.concepts.len(), self.dim], data).expect("registry is consistent")
    }

    /// Class anchors stacked `[d, n_classes]` for score projection.
    pub fn class_matrix_t(&self) -> Tensor {
        let k = self.classes.len();
        let mut data = vec![0.0f32; self.dim * k];
        for (j, a) in self.classes.iter().enumerate() {
            for (i, &v) in a.vector.iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        Tensor::constant(&[self.dim, k], data).expect("registry is consistent")
    }
}

fn validate_unit_norm(name: &str, v: &[f32], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Validation(format!(
            "anchor '{name}' has dimension {}, expected {dim}",
            v.len()
        )));
    }
    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-3 {
        return Err(Error::Validation(format!(
            "anchor '{name}' is not unit norm (got {norm:.6})"
        )));
    }
    Ok(())
}

// ── Anchor file: JSON manifest + raw little-endian f32 vectors ─────────────

#[derive(Debug, Serialize, Deserialize)]
pub struct AnchorManifest {
    pub dim: usize,
    pub count: usize,
    pub names: Vec<String>,
}

/// Load `(name, vector)` pairs from a manifest + raw f32 blob, validating
/// counts and unit norms.
pub fn load_anchor_file(
    manifest_path: &Path,
    vectors_path: &Path,
) -> Result<Vec<(String, Vec<f32>)>> {
    let manifest: AnchorManifest = serde_json::from_reader(std::fs::File::open(manifest_path)?)?;
    if manifest.names.len() != manifest.count {
        return Err(Error::Format(format!(
            "manifest declares {} anchors but lists {} names",
            manifest.count,
            manifest.names.len()
        )));
    }
    let mut raw = Vec::new();
    std::fs::File::open(vectors_path)?.read_to_end(&mut raw)?;
    let expected = manifest.count * manifest.dim * 4;
    if raw.len() != expected {
        return Err(Error::Format(format!(
            "vector blob is {} bytes, expected {expected}",
            raw.len()
        )));
    }
    let mut out = Vec::with_capacity(manifest.count);
    for (i, name) in manifest.names.iter().enumerate() {
        let base = i * manifest.dim * 4;
        let v: Vec<f32> = (0..manifest.dim)
            .map(|j| {
                let o = base + j * 4;
                f32::from_le_bytes([raw[o], raw[o + 1], raw[o + 2], raw[o + 3]])
            })
            .collect();
        validate_unit_norm(name, &v, manifest.dim)?;
        out.push((name.clone(), v));
    }
    Ok(out)
}

/// Write a `(manifest, blob)` anchor file pair.
pub fn write_anchor_file(
    manifest_path: &Path,
    vectors_path: &Path,
    entries: &[(String, Vec<f32>)],
    dim: usize,
) -> Result<()> {
    let manifest = AnchorManifest {
        dim,
        count: entries.len(),
        names: entries.iter().map(|(n, _)| n.clone()).collect(),
    };
    serde_json::to_writer_pretty(std::fs::File::create(manifest_path)?, &manifest)?;
    let mut blob = Vec::with_capacity(entries.len() * dim * 4);
    for (_, v) in entries {
        for &x in v {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(vectors_path, blob)?;
    Ok(())
}

/// Trainable projection of image patches into the model dimension.
///
/// Positional embeddings apply to patch tokens only; concept tokens get
/// none, which keeps concept outputs permutation-equivariant.
#[derive(Debug)]
pub struct PatchEmbedder {
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub projection: Tensor,
    pub proj_bias: Tensor,
    pub positional: Tensor,
}

impl PatchEmbedder {
    pub fn new<R: Rng>(
        patch_size: usize,
        image_h: usize,
        image_w: usize,
        channels: usize,
        dim: usize,
        init_std: f32,
        rng: &mut R,
    ) -> Result<Self> {
        if patch_size == 0 || image_h % patch_size != 0 || image_w % patch_size != 0 {
            return Err(Error::Validation(format!(
                "image {image_h}x{image_w} not divisible by patch size {patch_size}"
            )));
        }
        let n_patches = (image_h / patch_size) * (image_w / patch_size);
        let in_dim = patch_size * patch_size * channels;
        let gauss = |rng: &mut R, n: usize, std: f32| -> Vec<f32> {
            (0..n).map(|_| gaussian(rng) as f32 * std).collect()
        };
        // Positional embeddings start at a visible scale so patch identity
        // survives the first layer norm and attention can address cells.
        let pos_std = 0.2f32.max(init_std);
        Ok(PatchEmbedder {
            patch_size,
            image_h,
            image_w,
            channels,
            projection: Tensor::param(&[in_dim, dim], gauss(rng, in_dim * dim, init_std))?,
            proj_bias: Tensor::param(&[dim], vec![0.0; dim])?,
            positional: Tensor::param(&[n_patches, dim], gauss(rng, n_patches * dim, pos_std))?,
        })
    }

    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("patch.projection".into(), self.projection.clone()),
            ("patch.bias".into(), self.proj_bias.clone()),
            ("patch.positional".into(), self.positional.clone()),
        ]
    }

    /// Patch token sequence `[n_patches, d]` in raster order.
    pub fn embed_patches(&self, image: &Image) -> Result<Tensor> {
        if image.h != self.image_h || image.w != self.image_w || image.c != self.channels {
            return Err(Error::Validation(format!(
                "image {}x{}x{} does not match embedder {}x{}x{}",
                image.h, image.w, image.c, self.image_h, self.image_w, self.channels
            )));
        }
        let p = self.patch_size;
        let (gh, gw) = (image.h / p, image.w / p);
        let in_dim = p * p * image.c;
        let mut patches = vec![0.0f32; gh * gw * in_dim];
        for gy in 0..gh {
            for gx in 0..gw {
                let base = (gy * gw + gx) * in_dim;
                let mut k = 0;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..image.c {
                            patches[base + k] = image.pixel(gy * p + py, gx * p + px, ch);
                            k += 1;
                        }
                    }
                }
            }
        }
        let patch_mat = Tensor::constant(&[gh * gw, in_dim], patches)?;
        patch_mat
            .matmul(&self.projection)?
            .add_row(&self.proj_bias)?
            .add(&self.positional)
    }
}
