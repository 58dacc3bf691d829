//! Synthetic glyph dataset: a concept-class web with exact localization
//! ground truth.
//!
//! Each concept owns a unique cell of the image grid and a fixed binary
//! glyph pattern; a sample renders the glyphs of its class's concept set
//! with per-sample intensity jitter over Gaussian background noise. Classes
//! introduced after the first experience reuse `⌈ρk⌉` earlier concepts and
//! draw the rest from their own experience's new set.

use crate::anchors::Image;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WebSchema {
    pub experiences: usize,
    pub classes_per_experience: usize,
    pub new_concepts_per_experience: usize,
    pub concepts_per_class: usize,
    pub reuse_fraction: f64,
    pub image_size: usize,
    pub channels: usize,
    pub cell_grid: usize,
    /// Size of the shared glyph alphabet. Concepts reuse appearances, so
    /// telling two concepts apart requires reading their cells; global
    /// color statistics are not enough.
    pub appearance_count: usize,
    /// Fraction of classes built as a sibling of the previous class in
    /// their experience: same concept set up to one swapped member.
    /// Keeps class codes close, so single concept errors matter.
    pub sibling_fraction: f64,
    pub noise_std: f32,
    pub intensity_jitter: f32,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

impl Default for WebSchema {
    fn default() -> Self {
        WebSchema {
            experiences: 5,
            classes_per_experience: 4,
            new_concepts_per_experience: 8,
            concepts_per_class: 6,
            reuse_fraction: 0.5,
            image_size: 32,
            channels: 3,
            cell_grid: 8,
            appearance_count: 4,
            sibling_fraction: 0.5,
            noise_std: 0.5,
            intensity_jitter: 0.3,
            train_per_class: 200,
            val_per_class: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub id: usize,
    pub name: String,
    pub introduced_in: usize,
    /// Grid cell owning this concept's glyph; injective across concepts.
    pub cell: usize,
    /// Binary pattern over the cell's pixels, row-major.
    pub pattern: Vec<bool>,
    /// Per-channel glyph color weights.
    pub color: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub name: String,
    pub experience: usize,
    /// Sorted concept ids; the class-level active set of every sample.
    pub concepts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub cfg: WebSchema,
    pub concepts: Vec<ConceptSpec>,
    pub classes: Vec<ClassSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub class_id: usize,
    /// Sorted ids of active concepts (the class's set).
    pub active_concepts: Vec<usize>,
}

impl Sample {
    /// Materialize the class-level mask over the first `len` concepts.
    pub fn mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        for &c in &self.active_concepts {
            if c < len {
                m[c] = true;
            }
        }
        m
    }
}

/// One stage of the class-incremental stream.
#[derive(Debug, Clone)]
pub struct Experience {
    pub index: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub new_classes: Vec<usize>,
    pub new_class_names: Vec<String>,
    pub new_concepts: Vec<usize>,
    pub new_concept_names: Vec<String>,
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9e3779b97f4a7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    }
    h
}

impl Schema {
    pub fn cell_px(&self) -> usize {
        self.cfg.image_size / self.cfg.cell_grid
    }

    pub fn total_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn class(&self, id: usize) -> &ClassSpec {
        &self.classes[id]
    }

    /// Cumulative concept count through experience `t` (1-based).
    pub fn concepts_through(&self, t: usize) -> usize {
        self.concepts.iter().filter(|c| c.introduced_in <= t).count()
    }
}

/// Deterministic schema generation: concepts, cells, glyphs, and the
/// class-concept web.
pub fn generate_schema(cfg: &WebSchema) -> Result<Schema> {
    let total_concepts = cfg.experiences * cfg.new_concepts_per_experience;
    let cells = cfg.cell_grid * cfg.cell_grid;
    if cells < total_concepts {
        return Err(Error::Capacity(format!(
            "{total_concepts} concepts need unique cells but the grid has {cells}"
        )));
    }
    if cfg.image_size % cfg.cell_grid != 0 {
        return Err(Error::Config(format!(
            "image size {} not divisible by cell grid {}",
            cfg.image_size, cfg.cell_grid
        )));
    }
    if !(0.0..=1.0).contains(&cfg.reuse_fraction) {
        return Err(Error::Config("reuse fraction must lie in [0,1]".into()));
    }
    let k = cfg.concepts_per_class;
    let reused = (cfg.reuse_fraction * k as f64).ceil() as usize;
    if k > cfg.new_concepts_per_experience {
        return Err(Error::Config(format!(
            "experience 1 draws all {k} class concepts from {} new ones",
            cfg.new_concepts_per_experience
        )));
    }
    if cfg.experiences > 1 && k - reused > cfg.new_concepts_per_experience {
        return Err(Error::Config("not enough new concepts per experience".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(mix(cfg.seed, &[1]));
    let mut cell_order: Vec<usize> = (0..cells).collect();
    cell_order.shuffle(&mut rng);

    // Shared appearance alphabet: (pattern, color) pairs reused across
    // concepts, so a concept is its appearance at its cell.
    let cp = cfg.image_size / cfg.cell_grid;
    let n_appearances = cfg.appearance_count.max(1);
    let mut appearances: Vec<(Vec<bool>, Vec<f32>)> = Vec::with_capacity(n_appearances);
    for _ in 0..n_appearances {
        let on = (cp * cp / 2).max(1);
        let mut pix: Vec<usize> = (0..cp * cp).collect();
        pix.shuffle(&mut rng);
        let mut pattern = vec![false; cp * cp];
        for &p in pix.iter().take(on) {
            pattern[p] = true;
        }
        let color: Vec<f32> = (0..cfg.channels).map(|_| rng.gen_range(0.4f32..1.0)).collect();
        appearances.push((pattern, color));
    }

    let mut concepts = Vec::with_capacity(total_concepts);
    for e in 1..=cfg.experiences {
        for i in 0..cfg.new_concepts_per_experience {
            let id = concepts.len();
            let (pattern, color) = appearances[id % n_appearances].clone();
            concepts.push(ConceptSpec {
                id,
                name: format!("concept_e{e}_{i}"),
                introduced_in: e,
                cell: cell_order[id],
                pattern,
                color,
            });
        }
    }

    let mut classes = Vec::new();
    let mut used_sets: HashSet<Vec<usize>> = HashSet::new();
    for e in 1..=cfg.experiences {
        let old_pool: Vec<usize> = concepts
            .iter()
            .filter(|c| c.introduced_in < e)
            .map(|c| c.id)
            .collect();
        let new_pool: Vec<usize> = concepts
            .iter()
            .filter(|c| c.introduced_in == e)
            .map(|c| c.id)
            .collect();
        let n_old = if e == 1 { 0 } else { reused.min(k) };
        let n_new = k - n_old;
        for j in 0..cfg.classes_per_experience {
            // Classes must have distinct concept sets; resample collisions.
            // A sibling copies the previous class with one same-pool swap,
            // keeping the two codes at symmetric difference two.
            let prev = classes.last().filter(|c: &&ClassSpec| c.experience == e).cloned();
            let set = loop {
                let sibling = prev.as_ref().filter(|_| rng.gen_bool(cfg.sibling_fraction));
                let mut set: Vec<usize> = match sibling {
                    Some(base) => {
                        let mut set = base.concepts.clone();
                        let slot = rng.gen_range(0..set.len());
                        let removed = set.remove(slot);
                        let pool = if concepts[removed].introduced_in == e {
                            &new_pool
                        } else {
                            &old_pool
                        };
                        let candidates: Vec<usize> = pool
                            .iter()
                            .copied()
                            .filter(|c| !set.contains(c) && *c != removed)
                            .collect();
                        if candidates.is_empty() {
                            continue;
                        }
                        set.push(candidates[rng.gen_range(0..candidates.len())]);
                        set
                    }
                    None => {
                        let mut set: Vec<usize> = Vec::with_capacity(k);
                        let mut old = old_pool.clone();
                        old.shuffle(&mut rng);
                        set.extend(old.iter().take(n_old));
                        let mut new = new_pool.clone();
                        new.shuffle(&mut rng);
                        set.extend(new.iter().take(n_new));
                        set
                    }
                };
                set.sort_unstable();
                if used_sets.insert(set.clone()) {
                    break set;
                }
            };
            classes.push(ClassSpec {
                id: classes.len(),
                name: format!("class_e{e}_{j}"),
                experience: e,
                concepts: set,
            });
        }
    }

    Ok(Schema {
        cfg: cfg.clone(),
        concepts,
        classes,
    })
}

fn gaussian<R: Rng>(rng: &mut R) -> f32 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Render one sample: background noise everywhere, each active glyph set
/// exactly in its cell at a jittered intensity.
pub fn render_sample<R: Rng>(schema: &Schema, class_id: usize, rng: &mut R) -> Result<Sample> {
    let class = schema
        .classes
        .get(class_id)
        .ok_or_else(|| Error::Validation(format!("class id {class_id} not in schema")))?;
    let s = schema.cfg.image_size;
    let c = schema.cfg.channels;
    let mut image = Image::zeros(s, s, c);
    if schema.cfg.noise_std > 0.0 {
        for v in image.data.iter_mut() {
            *v = gaussian(rng) * schema.cfg.noise_std;
        }
    }
    let cp = schema.cell_px();
    for &cid in &class.concepts {
        let spec = &schema.concepts[cid];
        let alpha = 1.0 - schema.cfg.intensity_jitter * rng.gen::<f32>();
        let (cy, cx) = (spec.cell / schema.cfg.cell_grid, spec.cell % schema.cfg.cell_grid);
        for py in 0..cp {
            for px in 0..cp {
                if spec.pattern[py * cp + px] {
                    for ch in 0..c {
                        *image.pixel_mut(cy * cp + py, cx * cp + px, ch) = alpha * spec.color[ch];
                    }
                }
            }
        }
    }
    Ok(Sample {
        image,
        class_id,
        active_concepts: class.concepts.clone(),
    })
}

/// Per-experience train/val splits, deterministic under `seed`.
pub fn split_experiences(schema: &Schema, seed: u64) -> Result<Vec<Experience>> {
    let mut out = Vec::with_capacity(schema.cfg.experiences);
    for e in 1..=schema.cfg.experiences {
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut new_classes = Vec::new();
        let mut new_class_names = Vec::new();
        for class in schema.classes.iter().filter(|c| c.experience == e) {
            new_classes.push(class.id);
            new_class_names.push(class.name.clone());
            let mut rng = ChaCha20Rng::seed_from_u64(mix(seed, &[2, class.id as u64]));
            for _ in 0..schema.cfg.train_per_class {
                train.push(render_sample(schema, class.id, &mut rng)?);
            }
            for _ in 0..schema.cfg.val_per_class {
                val.push(render_sample(schema, class.id, &mut rng)?);
            }
        }
        let (new_concepts, new_concept_names) = schema
            .concepts
            .iter()
            .filter(|c| c.introduced_in == e)
            .map(|c| (c.id, c.name.clone()))
            .unzip();
        out.push(Experience {
            index: e,
            train,
            val,
            new_classes,
            new_class_names,
            new_concepts,
            new_concept_names,
        });
    }
    Ok(out)
}

// ── On-disk format ──────────────────────────────────────────────────────────
//
// schema.json plus one binary file per experience:
//   magic "MDS1" | version u32 | experience u32 | n_train u32 | n_val u32
//   | image_size u32 | channels u32 | mask_len u32 | payload | crc32 u32
// Samples are [class_id u32 | image f32-LE | bit-packed mask]; the CRC
// covers header and payload. All integers little-endian.

const DATA_MAGIC: &[u8; 4] = b"MDS1";
const DATA_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(buf: &[u8], off: &mut usize) -> Result<u32> {
    if *off + 4 > buf.len() {
        return Err(Error::Format("unexpected end of file".into()));
    }
    let v = u32::from_le_bytes([buf[*off], buf[*off + 1], buf[*off + 2], buf[*off + 3]]);
    *off += 4;
    Ok(v)
}

fn encode_sample(buf: &mut Vec<u8>, sample: &Sample, mask_len: usize) {
    push_u32(buf, sample.class_id as u32);
    for &v in &sample.image.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mask = sample.mask(mask_len);
    let mut packed = vec![0u8; mask_len.div_ceil(8)];
    for (i, &b) in mask.iter().enumerate() {
        if b {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    buf.extend_from_slice(&packed);
}

fn decode_sample(
    buf: &[u8],
    off: &mut usize,
    image_size: usize,
    channels: usize,
    mask_len: usize,
) -> Result<Sample> {
    let class_id = read_u32(buf, off)? as usize;
    let n_px = image_size * image_size * channels;
    if *off + n_px * 4 > buf.len() {
        return Err(Error::Format("truncated image payload".into()));
    }
    let mut data = Vec::with_capacity(n_px);
    for i in 0..n_px {
        let o = *off + i * 4;
        data.push(f32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]));
    }
    *off += n_px * 4;
    let packed_len = mask_len.div_ceil(8);
    if *off + packed_len > buf.len() {
        return Err(Error::Format("truncated mask payload".into()));
    }
    let mut active = Vec::new();
    for i in 0..mask_len {
        if buf[*off + i / 8] & (1 << (i % 8)) != 0 {
            active.push(i);
        }
    }
    *off += packed_len;
    Ok(Sample {
        image: Image::new(image_size, image_size, channels, data)?,
        class_id,
        active_concepts: active,
    })
}

/// Write schema.json and per-experience sample files into `dir`.
pub fn write_dataset(dir: &Path, schema: &Schema, experiences: &[Experience]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(dir.join("schema.json"))?),
        schema,
    )?;
    for exp in experiences {
        let mask_len = schema.concepts_through(exp.index);
        let mut buf = Vec::new();
        buf.extend_from_slice(DATA_MAGIC);
        push_u32(&mut buf, DATA_VERSION);
        push_u32(&mut buf, exp.index as u32);
        push_u32(&mut buf, exp.train.len() as u32);
        push_u32(&mut buf, exp.val.len() as u32);
        push_u32(&mut buf, schema.cfg.image_size as u32);
        push_u32(&mut buf, schema.cfg.channels as u32);
        push_u32(&mut buf, mask_len as u32);
        for s in exp.train.iter().chain(&exp.val) {
            encode_sample(&mut buf, s, mask_len);
        }
        let crc = crc32fast::hash(&buf);
        push_u32(&mut buf, crc);
        let mut f = std::fs::File::create(dir.join(format!("exp{}.bin", exp.index)))?;
        f.write_all(&buf)?;
    }
    Ok(())
}

/// Read a dataset directory back into schema + experiences.
pub fn read_dataset(dir: &Path) -> Result<(Schema, Vec<Experience>)> {
    let schema: Schema = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(
        dir.join("schema.json"),
    )?))?;
    let mut experiences = Vec::new();
    for e in 1..=schema.cfg.experiences {
        let path = dir.join(format!("exp{e}.bin"));
        if !path.exists() {
            return Err(Error::Format(format!(
                "schema declares {} experiences but {} is missing",
                schema.cfg.experiences,
                path.display()
            )));
        }
        let mut buf = Vec::new();
        std::fs::File::open(&path)?.read_to_end(&mut buf)?;
        if buf.len() < 8 || &buf[0..4] != DATA_MAGIC {
            return Err(Error::Format(format!("{} is not a sample file", path.display())));
        }
        let declared_crc = u32::from_le_bytes([
            buf[buf.len() - 4],
            buf[buf.len() - 3],
            buf[buf.len() - 2],
            buf[buf.len() - 1],
        ]);
        let computed = crc32fast::hash(&buf[..buf.len() - 4]);
        if declared_crc != computed {
            return Err(Error::Checksum {
                expected: declared_crc,
                computed,
            });
        }
        let mut off = 4;
        let version = read_u32(&buf, &mut off)?;
        if version != DATA_VERSION {
            return Err(Error::Version {
                expected: DATA_VERSION,
                found: version,
            });
        }
        let index = read_u32(&buf, &mut off)? as usize;
        if index != e {
            return Err(Error::Format(format!("expected experience {e}, file says {index}")));
        }
        let n_train = read_u32(&buf, &mut off)? as usize;
        let n_val = read_u32(&buf, &mut off)? as usize;
        let image_size = read_u32(&buf, &mut off)? as usize;
        let channels = read_u32(&buf, &mut off)? as usize;
        let mask_len = read_u32(&buf, &mut off)? as usize;
        if image_size != schema.cfg.image_size || channels != schema.cfg.channels {
            return Err(Error::Format("sample file disagrees with schema geometry".into()));
        }
        if mask_len != schema.concepts_through(e) {
            return Err(Error::Format(format!(
                "mask length {mask_len} does not match schema concept count {}",
                schema.concepts_through(e)
            )));
        }
        let payload_end = buf.len() - 4;
        let mut train = Vec::with_capacity(n_train);
        let mut val = Vec::with_capacity(n_val);
        for i in 0..n_train + n_val {
            if off >= payload_end {
                return Err(Error::Format("sample count exceeds payload".into()));
            }
            let s = decode_sample(&buf[..payload_end], &mut off, image_size, channels, mask_len)?;
            if i < n_train {
                train.push(s);
            } else {
                val.push(s);
            }
        }
        let mut new_classes = Vec::new();
        let mut new_class_names = Vec::new();
        for class in schema.classes.iter().filter(|c| c.experience == e) {
            new_classes.push(class.id);
            new_class_names.push(class.name.clone());
        }
        let (new_concepts, new_concept_names) = schema
            .concepts
            .iter()
            .filter(|c| c.introduced_in == e)
            .map(|c| (c.id, c.name.clone()))
            .unzip();
        experiences.push(Experience {
            index: e,
            train,
            val,
            new_classes,
            new_class_names,
            new_concepts,
            new_concept_names,
        });
    }
    Ok((schema, experiences))
}
