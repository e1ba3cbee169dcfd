//! Synthetic multi-domain scenes standing in for frozen encoder features.
//!
//! Each pseudo model assigns a unit-norm signature vector to every object
//! prototype. A scene paints axis-aligned rectangles of distinct prototypes
//! over a background prototype; a cell's feature in model `m` is the
//! signature of its prototype plus isotropic Gaussian noise.

mod cache;
mod partition;

pub use cache::{decode_cache, encode_cache, read_cache, write_cache, CACHE_MAGIC, FEATURE_MAGIC};
pub use partition::{partition, PartitionMode};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoModelSpec {
    pub model_id: u32,
    pub channels: usize,
    pub signature_noise: f32,
    /// Unit-norm signature per prototype id.
    pub signatures: Vec<Vec<f32>>,
}

impl PseudoModelSpec {
    pub fn random(model_id: u32, channels: usize, noise: f32, prototypes: usize, seed: u64) -> Self {
        let signatures = (0..prototypes)
            .map(|p| {
                let mut v = rng::normals(rng::derive(seed, &[rng::stream::SIGNATURE, model_id as u64, p as u64]), channels);
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect();
        PseudoModelSpec {
            model_id,
            channels,
            signature_noise: noise,
            signatures,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config(format!("model {} has zero channels", self.model_id)));
        }
        for (p, s) in self.signatures.iter().enumerate() {
            let n = s.iter().map(|x| x * x).sum::<f32>().sqrt();
            if s.len() != self.channels || (n - 1.0).abs() > 1e-4 {
                return Err(Error::Config(format!(
                    "model {} prototype {p}: signature must be unit-norm with {} channels",
                    self.model_id, self.channels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub prototype_ids: Vec<u32>,
    /// Inclusive range of objects per scene.
    pub objects_per_scene: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub background: u32,
}

/// One model's H×W×C feature map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub domain_id: u32,
    pub features: Vec<FeatureGrid>,
    /// 0 is background, 1..=k are object instances.
    pub gt_mask: Vec<u8>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.features.first().map_or(0, |f| f.height)
    }

    pub fn width(&self) -> usize {
        self.features.first().map_or(0, |f| f.width)
    }
}

/// Channel-wise concatenation of every model's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedFeatures {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub channel_offsets: Vec<usize>,
    /// N×C_tot, row-major over grid cells.
    pub data: Vec<f32>,
    pub gt_mask: Vec<u8>,
    pub scene_id: u64,
    pub domain_id: u32,
}

impl StackedFeatures {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// The channel block contributed by model `m`.
    pub fn segment(&self, m: usize) -> Vec<f32> {
        let start = self.channel_offsets[m];
        let end = self.channel_offsets.get(m + 1).copied().unwrap_or(self.channels);
        let mut out = Vec::with_capacity(self.tokens() * (end - start));
        for row in self.data.chunks(self.channels) {
            out.extend_from_slice(&row[start..end]);
        }
        out
    }
}

pub fn stack_features(scene: &Scene) -> Result<StackedFeatures> {
    let Some(first) = scene.features.first() else {
        return Err(Error::Invalid("scene has no feature grids".into()));
    };
    let (h, w) = (first.height, first.width);
    let mut offsets = Vec::with_capacity(scene.features.len());
    let mut total = 0;
    for f in &scene.features {
        if f.height != h || f.width != w {
            return Err(Error::shape("stack_features", &[h, w], &[f.height, f.width]));
        }
        offsets.push(total);
        total += f.channels;
    }
    let n = h * w;
    let mut data = Vec::with_capacity(n * total);
    for cell in 0..n {
        for f in &scene.features {
            data.extend_from_slice(&f.data[cell * f.channels..(cell + 1) * f.channels]);
        }
    }
    Ok(StackedFeatures {
        height: h,
        width: w,
        channels: total,
        channel_offsets: offsets,
        data,
        gt_mask: scene.gt_mask.clone(),
        scene_id: scene.scene_id,
        domain_id: scene.domain_id,
    })
}

const PLACEMENT_ATTEMPTS: usize = 100;
const MIN_REGION: usize = 4;

/// Whether every instance label in `1..=k` forms one 4-connected region of at
/// least four cells.
pub fn instances_valid(mask: &[u8], h: usize, w: usize, k: usize) -> bool {
    let mut seen = vec![false; mask.len()];
    for label in 1..=k as u8 {
        let cells: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == label).collect();
        if cells.len() < MIN_REGION {
            return false;
        }
        let mut stack = vec![cells[0]];
        seen[cells[0]] = true;
        let mut reached = 0;
        while let Some(c) = stack.pop() {
            reached += 1;
            let (r, col) = (c / w, c % w);
            let mut visit = |nr: usize, nc: usize| {
                let j = nr * w + nc;
                if mask[j] == label && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(r - 1, col);
            }
            if r + 1 < h {
                visit(r + 1, col);
            }
            if col > 0 {
                visit(r, col - 1);
            }
            if col + 1 < w {
                visit(r, col + 1);
            }
        }
        if reached != cells.len() {
            return false;
        }
    }
    true
}

/// Paints a random layout of rectangles and samples per-model features.
pub fn generate_scene(domain: &DomainSpec, models: &[PseudoModelSpec], seed: u64) -> Result<Scene> {
    let (h, w) = (domain.height, domain.width);
    if h < 8 || w < 8 {
        return Err(Error::Config(format!("grid {h}x{w} smaller than 8x8")));
    }
    let (kmin, kmax) = domain.objects_per_scene;
    if kmin > kmax || kmax > domain.prototype_ids.len() || kmax > 254 {
        return Err(Error::Config(format!(
            "domain {}: objects_per_scene {kmin}..={kmax} incompatible with {} prototypes",
            domain.domain_id,
            domain.prototype_ids.len()
        )));
    }
    for m in models {
        let needed = domain.prototype_ids.iter().chain(std::iter::once(&domain.background));
        if let Some(p) = needed.into_iter().find(|&&p| p as usize >= m.signatures.len()) {
            return Err(Error::Config(format!("prototype {p} missing from model {}", m.model_id)));
        }
    }
    let mut r = rng::rng(rng::derive(seed, &[0]));
    let k = r.gen_range(kmin..=kmax);
    let protos: Vec<u32> = domain
        .prototype_ids
        .choose_multiple(&mut r, k)
        .copied()
        .collect();
    let side_min = 2.max(h.min(w) / 5);
    let mut mask = vec![0u8; h * w];
    for obj in 0..k {
        let label = obj as u8 + 1;
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let rh = r.gen_range(side_min..=(h / 2).max(side_min));
            let rw = r.gen_range(side_min..=(w / 2).max(side_min));
            let r0 = r.gen_range(0..=h - rh);
            let c0 = r.gen_range(0..=w - rw);
            let mut cand = mask.clone();
            for row in r0..r0 + rh {
                cand[row * w + c0..row * w + c0 + rw].fill(label);
            }
            if instances_valid(&cand, h, w, obj + 1) {
                mask = cand;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Invalid(format!(
                "could not place object {label} with at least {MIN_REGION} connected cells after {PLACEMENT_ATTEMPTS} attempts"
            )));
        }
    }
    let proto_of = |label: u8| -> usize {
        if label == 0 {
            domain.background as usize
        } else {
            protos[label as usize - 1] as usize
        }
    };
    let features = models
        .iter()
        .map(|m| {
            let c = m.channels;
            let noise = rng::normals(rng::derive(seed, &[1, m.model_id as u64]), h * w * c);
            let mut data = Vec::with_capacity(h * w * c);
            for (cell, &label) in mask.iter().enumerate() {
                let sig = &m.signatures[proto_of(label)];
                for ch in 0..c {
                    let eps = if m.signature_noise == 0.0 {
                        0.0
                    } else {
                        m.signature_noise * noise[cell * c + ch]
                    };
                    data.push(sig[ch] + eps);
                }
            }
            FeatureGrid {
                height: h,
                width: w,
                channels: c,
                data,
            }
        })
        .collect();
    Ok(Scene {
        scene_id: 0,
        domain_id: domain.domain_id,
        features,
        gt_mask: mask,
    })
}

/// Prototype universe for a set of domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub models: Vec<PseudoModelSpec>,
    pub domains: Vec<DomainSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub domains: usize,
    pub prototypes_per_domain: usize,
    /// Fraction of a domain's object prototypes shared with other domains of
    /// the same group.
    pub overlap: f64,
    /// Group index per domain; empty puts every domain in one group.
    pub groups: Vec<usize>,
    pub objects_per_scene: (usize, usize),
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub noise: f32,
}

impl SyntheticWorld {
    pub fn build(spec: &WorldSpec, seed: u64) -> Result<Self> {
        if spec.domains == 0 || spec.prototypes_per_domain == 0 {
            return Err(Error::Config("need at least one domain and prototype".into()));
        }
        if !(0.0..=1.0).contains(&spec.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1]", spec.overlap)));
        }
        if !spec.groups.is_empty() && spec.groups.len() != spec.domains {
            return Err(Error::Config("groups must list one entry per domain".into()));
        }
        let group_of = |d: usize| spec.groups.get(d).copied().unwrap_or(0);
        let shared = (spec.overlap * spec.prototypes_per_domain as f64).round() as usize;
        let n_groups = (0..spec.domains).map(group_of).max().unwrap_or(0) + 1;
        let mut next = 0u32;
        let pools: Vec<Vec<u32>> = (0..n_groups)
            .map(|_| {
                let pool = (next..next + shared as u32).collect();
                next += shared as u32;
                pool
            })
            .collect();
        let mut domains = Vec::with_capacity(spec.domains);
        for d in 0..spec.domains {
            let mut ids = pools[group_of(d)].clone();
            for _ in shared..spec.prototypes_per_domain {
                ids.push(next);
                next += 1;
            }
            let background = next;
            next += 1;
            domains.push(DomainSpec {
                domain_id: d as u32,
                prototype_ids: ids,
                objects_per_scene: spec.objects_per_scene,
                height: spec.height,
                width: spec.width,
                background,
            });
        }
        let models = spec
            .channels
            .iter()
            .enumerate()
            .map(|(m, &c)| PseudoModelSpec::random(m as u32, c, spec.noise, next as usize, seed))
            .collect();
        Ok(SyntheticWorld { models, domains })
    }

    pub fn total_channels(&self) -> usize {
        self.models.iter().map(|m| m.channels).sum()
    }

    /// Scenes `first..first+count` of a domain, each seeded by its id.
    pub fn scenes(&self, domain: usize, first: u64, count: usize, seed: u64) -> Result<Vec<Scene>> {
        let spec = &self.domains[domain];
        (first..first + count as u64)
            .map(|id| {
                let s = rng::derive(seed, &[rng::stream::DATA, domain as u64, id]);
                let mut scene = generate_scene(spec, &self.models, s)?;
                scene.scene_id = id;
                Ok(scene)
            })
            .collect()
    }
}
