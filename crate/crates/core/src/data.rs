//! Procedural pedestrians.
//!
//! Each identity is a head/torso/leg colour triple drawn from a domain
//! palette plus an optional side bag. The three body bands are laid out so
//! the three default part windows each see mostly one attribute, which
//! plants cross-identity part similarity by construction: two identities
//! share a torso colour with probability `1 / palette_len`.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PatError, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub type Rgb = [f32; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: usize,
    pub head_color: usize,
    pub torso_color: usize,
    pub leg_color: usize,
    pub bag: Option<Side>,
}

/// Appearance statistics of one camera network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub palette: Vec<Rgb>,
    /// Mean background colour; each camera draws its own around it.
    pub background: Rgb,
    pub background_spread: f32,
    pub noise_sigma: f32,
    pub gain_range: (f32, f32),
    pub cameras: usize,
    /// Maximum position jitter in pixels (both axes).
    pub jitter: i32,
    /// Seed for camera backgrounds and identity draws.
    pub seed: u64,
}

impl DomainSpec {
    /// Saturated palette, mild noise, two cameras.
    pub fn source() -> Self {
        Self {
            name: "A".into(),
            palette: vec![
                [0.90, 0.10, 0.10],
                [0.10, 0.75, 0.15],
                [0.15, 0.25, 0.90],
                [0.95, 0.85, 0.10],
                [0.85, 0.15, 0.85],
                [0.10, 0.85, 0.85],
            ],
            background: [0.45, 0.45, 0.45],
            background_spread: 0.15,
            noise_sigma: 0.03,
            gain_range: (0.85, 1.15),
            cameras: 2,
            jitter: 2,
            seed: 11,
        }
    }

    /// Shifted, darker palette with heavier noise and three cameras.
    pub fn target() -> Self {
        Self {
            name: "B".into(),
            palette: vec![
                [0.70, 0.25, 0.15],
                [0.25, 0.55, 0.25],
                [0.25, 0.30, 0.70],
                [0.75, 0.65, 0.25],
                [0.60, 0.25, 0.60],
                [0.25, 0.60, 0.60],
            ],
            background: [0.35, 0.40, 0.30],
            background_spread: 0.2,
            noise_sigma: 0.06,
            gain_range: (0.7, 1.2),
            cameras: 3,
            jitter: 3,
            seed: 23,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.palette.is_empty() {
            return Err(PatError::config("empty palette"));
        }
        if self.noise_sigma < 0.0 || self.background_spread < 0.0 {
            return Err(PatError::config("noise and spread must be >= 0"));
        }
        if self.cameras < 2 {
            return Err(PatError::config("at least two cameras required"));
        }
        if !(self.gain_range.0 > 0.0 && self.gain_range.0 <= self.gain_range.1) {
            return Err(PatError::config("gain range must satisfy 0 < lo <= hi"));
        }
        if self.jitter < 0 {
            return Err(PatError::config("jitter must be >= 0"));
        }
        Ok(())
    }

    fn camera_background(&self, camera: usize) -> Rgb {
        let mut r = rng::rng(self.seed, Stream::Background, camera as u64, 0);
        let mut c = self.background;
        for ch in &mut c {
            *ch = (*ch + r.gen_range(-1.0..=1.0) * self.background_spread).clamp(0.0, 1.0);
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub id: usize,
    pub camera: usize,
    pub domain: String,
    /// `3 x H x W`, values in [0, 1].
    pub image: Tensor<f32>,
}

/// One JSON-lines metadata row of a dataset dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub index: usize,
    pub id: usize,
    pub camera: usize,
    pub domain: String,
}

impl From<&SampleRecord> for RecordMeta {
    fn from(r: &SampleRecord) -> Self {
        Self {
            index: r.index,
            id: r.id,
            camera: r.camera,
            domain: r.domain.clone(),
        }
    }
}

/// Generated samples plus the identity table they were rendered from.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub identities: Vec<IdentitySpec>,
}

impl Dataset {
    pub fn ids(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn images(&self) -> Vec<Tensor<f32>> {
        self.records.iter().map(|r| r.image.clone()).collect()
    }

    pub fn meta(&self) -> Vec<RecordMeta> {
        self.records.iter().map(RecordMeta::from).collect()
    }

    pub fn identity(&self, id: usize) -> Option<&IdentitySpec> {
        self.identities.iter().find(|s| s.id == id)
    }
}

// Band boundaries as fractions of image height: head / torso / legs.
const HEAD_END: f32 = 20.0 / 64.0;
const TORSO_END: f32 = 44.0 / 64.0;
const BAG_COLOR: Rgb = [0.30, 0.18, 0.08];

/// Draws `num_ids` identities with pairwise distinct colour triples.
pub fn draw_identities(num_ids: usize, domain: &DomainSpec, seed: u64) -> Result<Vec<IdentitySpec>> {
    domain.validate()?;
    let c = domain.palette.len();
    if c * c * c < num_ids {
        return Err(PatError::config(format!(
            "palette of {c} colours yields {} distinct identities, {num_ids} requested",
            c * c * c
        )));
    }
    let mut r = rng::rng(seed ^ domain.seed, Stream::Identity, 0, 0);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(num_ids);
    while out.len() < num_ids {
        let triple = (r.gen_range(0..c), r.gen_range(0..c), r.gen_range(0..c));
        let bag = match r.gen_range(0..3) {
            0 => None,
            1 => Some(Side::Left),
            _ => Some(Side::Right),
        };
        if seen.insert(triple) {
            out.push(IdentitySpec {
                id: out.len(),
                head_color: triple.0,
                torso_color: triple.1,
                leg_color: triple.2,
                bag,
            });
        }
    }
    Ok(out)
}

/// Renders one image of `who` as seen by `camera`.
pub fn render(
    who: &IdentitySpec,
    domain: &DomainSpec,
    camera: usize,
    h: usize,
    w: usize,
    r: &mut impl Rng,
) -> Tensor<f32> {
    let j = domain.jitter;
    let dx = if j > 0 { r.gen_range(-j..=j) } else { 0 };
    let dy = if j > 0 { r.gen_range(-j..=j) } else { 0 };
    let (lo, hi) = domain.gain_range;
    let gain = if hi > lo { r.gen_range(lo..=hi) } else { lo };
    render_at(who, domain, camera, (h, w), (dy, dx), gain, r)
}

/// Renders with an explicit body offset and illumination gain; only the
/// pixel noise is drawn from `r`.
pub fn render_at(
    who: &IdentitySpec,
    domain: &DomainSpec,
    camera: usize,
    (h, w): (usize, usize),
    (dy, dx): (i32, i32),
    gain: f32,
    r: &mut impl Rng,
) -> Tensor<f32> {
    let bg = domain.camera_background(camera);
    let noise = (domain.noise_sigma > 0.0).then(|| Normal::new(0.0f32, domain.noise_sigma).expect("sigma >= 0"));

    let hf = h as f32;
    let wf = w as f32;
    let head_end = (HEAD_END * hf).round() as i32;
    let torso_end = (TORSO_END * hf).round() as i32;
    let body_l = (0.2 * wf).round() as i32;
    let body_r = (0.8 * wf).round() as i32;
    let head_l = (0.3 * wf).round() as i32;
    let head_r = (0.7 * wf).round() as i32;
    let bag_w = (0.15 * wf).round().max(1.0) as i32;
    let bag_top = head_end + (torso_end - head_end) / 3;
    let bag_bot = torso_end;

    let pal = &domain.palette;
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h as i32 {
        for x in 0..w as i32 {
            // body coordinates before jitter
            let (by, bx) = (y - dy, x - dx);
            let mut color = bg;
            if (0..head_end).contains(&by) && (head_l..head_r).contains(&bx) {
                color = pal[who.head_color];
            } else if (head_end..torso_end).contains(&by) && (body_l..body_r).contains(&bx) {
                color = pal[who.torso_color];
            } else if (torso_end..h as i32).contains(&by) && (body_l..body_r).contains(&bx) {
                color = pal[who.leg_color];
            }
            if let Some(side) = who.bag {
                let (l, rr) = match side {
                    Side::Left => (body_l - bag_w, body_l),
                    Side::Right => (body_r, body_r + bag_w),
                };
                if (bag_top..bag_bot).contains(&by) && (l..rr).contains(&bx) {
                    color = BAG_COLOR;
                }
            }
            for ch in 0..3 {
                let mut v = color[ch] * gain;
                if let Some(n) = &noise {
                    v += n.sample(r);
                }
                data[ch * h * w + y as usize * w + x as usize] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image dims")
}

/// `num_ids * images_per_id` records, identity-major. Cameras are assigned
/// round-robin over the global record index. Record `i` is rendered from a
/// generator keyed by `(seed, i)`, so the output is reproducible.
pub fn generate_dataset(
    num_ids: usize,
    images_per_id: usize,
    domain: &DomainSpec,
    seed: u64,
    image_h: usize,
    image_w: usize,
) -> Result<Dataset> {
    if num_ids < 2 || images_per_id < 2 {
        return Err(PatError::config("need at least 2 identities with 2 images each"));
    }
    let identities = draw_identities(num_ids, domain, seed)?;
    let mut records = Vec::with_capacity(num_ids * images_per_id);
    for who in &identities {
        for _ in 0..images_per_id {
            let index = records.len();
            let camera = index % domain.cameras;
            let mut r = rng::rng(seed ^ domain.seed, Stream::Render, index as u64, 0);
            let image = render(who, domain, camera, image_h, image_w, &mut r);
            records.push(SampleRecord {
                index,
                id: who.id,
                camera,
                domain: domain.name.clone(),
                image,
            });
        }
    }
    Ok(Dataset {
        records,
        identities,
    })
}

/// Splits PK batches for one epoch: each batch holds exactly `p` distinct
/// identities with `k` instances each, and no index repeats within the
/// epoch. Identities with fewer than `k` images are never drawn; leftover
/// instances that cannot fill a batch are dropped.
pub fn pk_sample(ids: &[usize], p: usize, k: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if p == 0 || k == 0 {
        return Err(PatError::config("P and K must be >= 1"));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    let eligible = by_id.values().filter(|v| v.len() >= k).count();
    if eligible < p {
        let short: Vec<usize> = by_id
            .iter()
            .filter(|(_, v)| v.len() < k)
            .map(|(&id, _)| id)
            .collect();
        return Err(PatError::config(format!(
            "need {p} identities with >= {k} images, have {eligible}; short identities: {short:?}"
        )));
    }
    let mut r = rng::rng(seed, Stream::Sampler, epoch, 0);
    // per identity: shuffled chunks of k
    let mut chunks: Vec<(usize, Vec<Vec<usize>>)> = Vec::new();
    for (&id, idx) in &by_id {
        let mut idx = idx.clone();
        idx.shuffle(&mut r);
        let c: Vec<Vec<usize>> = idx.chunks_exact(k).map(<[usize]>::to_vec).collect();
        if !c.is_empty() {
            chunks.push((id, c));
        }
    }
    let mut batches = Vec::new();
    loop {
        let mut open: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].1.is_empty()).collect();
        if open.len() < p {
            break;
        }
        open.shuffle(&mut r);
        // prefer identities with the most chunks left to use the epoch fully
        open.sort_by_key(|&i| std::cmp::Reverse(chunks[i].1.len()));
        let mut batch = Vec::with_capacity(p * k);
        for &i in &open[..p] {
            batch.extend(chunks[i].1.pop().expect("open chunk"));
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Flips `image` horizontally with probability `flip_prob`, drawing from a
/// generator keyed by `(seed, step, index)`.
pub fn augment(image: &Tensor<f32>, flip_prob: f64, seed: u64, step: u64, index: u64) -> Tensor<f32> {
    let mut r = rng::rng(seed, Stream::Augment, step, index);
    if r.gen_bool(flip_prob.clamp(0.0, 1.0)) {
        hflip(image)
    } else {
        image.clone()
    }
}

pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let w = image.cols();
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_identical() {
        let d = DomainSpec::source();
        let a = generate_dataset(4, 3, &d, 9, 64, 32).unwrap();
        let b = generate_dataset(4, 3, &d, 9, 64, 32).unwrap();
        assert_eq!(a.records, b.records);
        let c = generate_dataset(4, 3, &d, 10, 64, 32).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn pixels_in_unit_range() {
        let d = DomainSpec::target();
        let a = generate_dataset(3, 2, &d, 1, 64, 32).unwrap();
        for r in &a.records {
            assert!(r.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn clean_images_differ_only_by_jitter() {
        let mut d = DomainSpec::source();
        d.noise_sigma = 0.0;
        d.gain_range = (1.0, 1.0);
        let ds = generate_dataset(2, 6, &d, 4, 64, 32).unwrap();
        // records 0, 2, 4 share identity 0 and camera 0
        let who = *ds.identity(0).unwrap();
        let mut r = rng::rng(0, Stream::Render, 0, 0);
        for rec in [&ds.records[0], &ds.records[2], &ds.records[4]] {
            assert_eq!((rec.id, rec.camera), (0, 0));
            let explained = (-d.jitter..=d.jitter).any(|dy| {
                (-d.jitter..=d.jitter)
                    .any(|dx| render_at(&who, &d, 0, (64, 32), (dy, dx), 1.0, &mut r) == rec.image)
            });
            assert!(explained, "record {} is not a pure translation", rec.index);
        }
    }

    #[test]
    fn palette_too_small() {
        let mut d = DomainSpec::source();
        d.palette.truncate(2);
        assert!(matches!(generate_dataset(9, 2, &d, 0, 64, 32), Err(PatError::Config(_))));
    }

    #[test]
    fn domain_validation() {
        let mut d = DomainSpec::source();
        d.cameras = 1;
        assert!(d.validate().is_err());
        let mut d = DomainSpec::source();
        d.noise_sigma = -1.0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn pk_small_example() {
        let ids = [0, 0, 1, 1, 2, 2, 3, 3];
        let batches = pk_sample(&ids, 2, 2, 5, 0).unwrap();
        assert_eq!(batches.len(), 2);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        for b in &batches {
            let distinct: HashSet<usize> = b.iter().map(|&i| ids[i]).collect();
            assert_eq!(distinct.len(), 2);
        }
    }

    #[test]
    fn pk_reports_short_identities() {
        let ids = [0, 0, 0, 1, 2, 2, 2];
        match pk_sample(&ids, 3, 2, 0, 0) {
            Err(PatError::Config(msg)) => assert!(msg.contains("[1]"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| i as f32);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
        assert_eq!(augment(&img, 0.0, 1, 2, 3), img);
        assert_eq!(augment(&img, 1.0, 1, 2, 3), hflip(&img));
    }
}
