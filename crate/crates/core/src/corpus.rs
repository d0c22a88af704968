//! Phantom corpora: the benchmark centers (source, target1, target2) and the
//! separate pretraining pools, with on-disk NIfTI storage.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::volume::{
    load_mask, load_volume, make_phantom, make_untagged_phantom, normalize_intensity, save_mask, save_volume,
    DomainRole, DomainTag, PhantomSpec, Phase, SegMask, Volume,
};

/// Per-center deviations from the base phantom spec.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomOverrides {
    pub center_noise_sigma: Option<f64>,
    pub bias_field_strength: Option<f64>,
    pub contrast_gap: Option<f64>,
    pub boundary_suppression: Option<f64>,
    pub texture_amplitude: Option<f64>,
    pub n_distractors: Option<usize>,
    pub vessel_contrast: Option<f64>,
    pub organlike_distractors: Option<bool>,
}

impl PhantomOverrides {
    pub fn apply(&self, base: &PhantomSpec, phase: Phase) -> PhantomSpec {
        let mut s = base.clone();
        s.phase = phase;
        if let Some(v) = self.center_noise_sigma {
            s.center_noise_sigma = v;
        }
        if let Some(v) = self.bias_field_strength {
            s.bias_field_strength = v;
        }
        if let Some(v) = self.contrast_gap {
            s.contrast_gap = v;
        }
        if let Some(v) = self.boundary_suppression {
            s.boundary_suppression = v;
        }
        if let Some(v) = self.texture_amplitude {
            s.texture_amplitude = v;
        }
        if let Some(v) = self.n_distractors {
            s.n_distractors = v;
        }
        if let Some(v) = self.vessel_contrast {
            s.vessel_contrast = v;
        }
        if let Some(v) = self.organlike_distractors {
            s.organlike_distractors = v;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterProfile {
    pub name: String,
    pub phase: Phase,
    pub role: DomainRole,
    pub n_cases: usize,
    #[serde(default)]
    pub profile: PhantomOverrides,
}

/// The two labeled pretraining modalities, sampled 1:1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolProfile {
    pub name: String,
    pub phase: Phase,
    pub modality: Modality,
    pub n_cases: usize,
    pub labeled: bool,
    #[serde(default)]
    pub profile: PhantomOverrides,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub phantom: PhantomSpec,
    pub centers: Vec<CenterProfile>,
    pub pools: Vec<PoolProfile>,
}

fn center(name: &str, phase: Phase, role: DomainRole, profile: PhantomOverrides) -> CenterProfile {
    CenterProfile {
        name: name.into(),
        phase,
        role,
        n_cases: 15,
        profile,
    }
}

fn pool(
    name: &str,
    phase: Phase,
    modality: Modality,
    n_cases: usize,
    labeled: bool,
    profile: PhantomOverrides,
) -> PoolProfile {
    PoolProfile {
        name: name.into(),
        phase,
        modality,
        n_cases,
        labeled,
        profile,
    }
}

impl Default for CorpusConfig {
    /// Two venous source centers, one venous target center, one
    /// out-of-phase target center (15 cases each), plus pretraining pools.
    fn default() -> Self {
        let p = |noise: f64, bias: f64| PhantomOverrides {
            center_noise_sigma: Some(noise),
            bias_field_strength: Some(bias),
            ..Default::default()
        };
        CorpusConfig {
            phantom: PhantomSpec::default(),
            centers: vec![
                center("SRC_A", Phase::Venous, DomainRole::Source, p(0.10, 0.10)),
                center("SRC_B", Phase::Venous, DomainRole::Source, p(0.15, 0.20)),
                center("TGT_C", Phase::Venous, DomainRole::Target1, p(0.20, 0.30)),
                center("TGT_D", Phase::OutOfPhase, DomainRole::Target2, p(0.15, 0.20)),
            ],
            pools: vec![
                pool("PRE_MR", Phase::Venous, Modality::A, 12, true, p(0.12, 0.15)),
                pool(
                    "PRE_CT",
                    Phase::OutOfPhase,
                    Modality::B,
                    12,
                    true,
                    PhantomOverrides {
                        boundary_suppression: Some(0.0),
                        texture_amplitude: Some(0.25),
                        ..p(0.08, 0.05)
                    },
                ),
                pool("PRE_UV", Phase::Venous, Modality::A, 16, false, p(0.18, 0.25)),
                pool("PRE_UO", Phase::OutOfPhase, Modality::A, 16, false, p(0.12, 0.25)),
            ],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        let mut names = std::collections::BTreeSet::new();
        for c in &self.centers {
            DomainTag::new(c.name.clone(), c.phase, c.role)?;
            c.profile.apply(&self.phantom, c.phase).validate()?;
            if !names.insert(c.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate center {}", c.name)));
            }
        }
        for p in &self.pools {
            p.profile.apply(&self.phantom, p.phase).validate()?;
            if !names.insert(p.name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "pool {} reuses a center name; pools must come from non-benchmark centers",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

fn case_seed(corpus_seed: u64, i: usize) -> u64 {
    corpus_seed.wrapping_mul(1000).wrapping_add(i as u64)
}

/// One benchmark case with a z-scored image.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub tag: DomainTag,
    pub volume: Volume,
    pub mask: SegMask,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    cases: BTreeMap<String, Case>,
}

impl Corpus {
    pub fn from_cases(cases: Vec<Case>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for c in cases {
            let id = c.id.clone();
            if map.insert(id.clone(), c).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate case id {id}")));
            }
        }
        Ok(Corpus { cases: map })
    }

    pub fn get(&self, id: &str) -> Result<&Case> {
        self.cases
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("case {id} not in corpus")))
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn cases(&self) -> impl Iterator<Item = &Case> {
        self.cases.values()
    }

    /// `(case_id, tag)` pairs, the input of the split protocol.
    pub fn tagged(&self) -> Vec<(String, DomainTag)> {
        self.cases.values().map(|c| (c.id.clone(), c.tag.clone())).collect()
    }
}

fn normalized(volume: Volume, mask: SegMask) -> Result<(Volume, SegMask)> {
    mask.check_pair(&volume)?;
    Ok((normalize_intensity(&volume)?, mask))
}

pub fn build_corpus(cfg: &CorpusConfig, seed: u64, exec: ExecMode) -> Result<Corpus> {
    cfg.validate()?;
    let jobs: Vec<(&CenterProfile, usize)> = cfg
        .centers
        .iter()
        .flat_map(|c| (0..c.n_cases).map(move |i| (c, i)))
        .collect();
    let cases = exec.try_map(&jobs, |(c, i)| {
        let tag = DomainTag::new(c.name.clone(), c.phase, c.role)?;
        let spec = c.profile.apply(&cfg.phantom, c.phase);
        let ph = make_phantom(&spec, &tag, case_seed(seed, *i))?;
        let (volume, mask) = normalized(ph.volume, ph.mask)?;
        Ok::<_, Error>(Case {
            id: volume.case_id().to_string(),
            tag,
            volume,
            mask,
        })
    })?;
    Corpus::from_cases(cases)
}

/// One pretraining case; unlabeled cases carry no mask.
#[derive(Clone, Debug)]
pub struct PoolCase {
    pub id: String,
    pub pool: String,
    pub phase: Phase,
    pub modality: Modality,
    pub volume: Volume,
    pub mask: Option<SegMask>,
}

#[derive(Clone, Debug, Default)]
pub struct Pools {
    pub labeled: Vec<PoolCase>,
    pub unlabeled: Vec<PoolCase>,
}

pub fn build_pools(cfg: &CorpusConfig, seed: u64, exec: ExecMode) -> Result<Pools> {
    cfg.validate()?;
    let jobs: Vec<(&PoolProfile, usize)> = cfg
        .pools
        .iter()
        .flat_map(|p| (0..p.n_cases).map(move |i| (p, i)))
        .collect();
    let cases = exec.try_map(&jobs, |(p, i)| {
        let spec = p.profile.apply(&cfg.phantom, p.phase);
        let (v, m) = make_untagged_phantom(&spec, &p.name, case_seed(seed, *i))?;
        let (volume, mask) = normalized(v, m)?;
        Ok::<_, Error>(PoolCase {
            id: volume.case_id().to_string(),
            pool: p.name.clone(),
            phase: p.phase,
            modality: p.modality,
            volume,
            mask: p.labeled.then_some(mask),
        })
    })?;
    let (labeled, unlabeled) = cases.into_iter().partition(|c| c.mask.is_some());
    Ok(Pools { labeled, unlabeled })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseFile {
    pub case_id: String,
    pub tag: DomainTag,
    pub image: String,
    pub mask: String,
}

pub const CORPUS_INDEX: &str = "cases.json";

/// Writes raw phantoms (before normalization) as NIfTI plus an index file.
pub fn write_corpus(cfg: &CorpusConfig, seed: u64, dir: impl AsRef<Path>, exec: ExecMode) -> Result<Vec<CaseFile>> {
    cfg.validate()?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jobs: Vec<(&CenterProfile, usize)> = cfg
        .centers
        .iter()
        .flat_map(|c| (0..c.n_cases).map(move |i| (c, i)))
        .collect();
    let index = exec.try_map(&jobs, |(c, i)| {
        let tag = DomainTag::new(c.name.clone(), c.phase, c.role)?;
        let spec = c.profile.apply(&cfg.phantom, c.phase);
        let ph = make_phantom(&spec, &tag, case_seed(seed, *i))?;
        let id = ph.volume.case_id().to_string();
        let image = format!("{id}.nii.gz");
        let mask = format!("{id}_mask.nii.gz");
        save_volume(&ph.volume, dir.join(&image))?;
        save_mask(&ph.mask, dir.join(&mask))?;
        Ok::<_, Error>(CaseFile {
            case_id: id,
            tag,
            image,
            mask,
        })
    })?;
    let p = dir.join(CORPUS_INDEX);
    std::fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&p, e))?;
    Ok(index)
}

/// Loads a corpus written by [`write_corpus`], z-scoring each image.
pub fn load_corpus(dir: impl AsRef<Path>, exec: ExecMode) -> Result<Corpus> {
    let dir = dir.as_ref();
    let p = dir.join(CORPUS_INDEX);
    let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let index: Vec<CaseFile> = serde_json::from_str(&s)?;
    let cases = exec.try_map(&index, |f| {
        f.tag.validate()?;
        let v = load_volume(dir.join(&f.image))?.with_case_id(f.case_id.clone());
        let m = load_mask(dir.join(&f.mask))?;
        let m = SegMask::new(m.data().clone(), m.spacing(), f.case_id.clone())?;
        let (volume, mask) = normalized(v, m)?;
        Ok::<_, Error>(Case {
            id: f.case_id.clone(),
            tag: f.tag.clone(),
            volume,
            mask,
        })
    })?;
    Corpus::from_cases(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CorpusConfig {
        let mut c = CorpusConfig::default();
        for x in &mut c.centers {
            x.n_cases = 2;
        }
        for p in &mut c.pools {
            p.n_cases = 2;
        }
        c
    }

    #[test]
    fn default_layout() {
        let c = CorpusConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.centers.iter().map(|c| c.n_cases).sum::<usize>(), 60);
        assert_eq!(c.centers.iter().filter(|c| c.role == DomainRole::Source).count(), 2);
    }

    #[test]
    fn build_is_deterministic_and_normalized() {
        let cfg = tiny();
        let a = build_corpus(&cfg, 3, ExecMode::Parallel).unwrap();
        let b = build_corpus(&cfg, 3, ExecMode::Sequential).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.cases().zip(b.cases()) {
            assert_eq!(x.volume, y.volume);
            let (m, s) = x.volume.mean_std();
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
            assert!(!x.mask.is_empty());
        }
        assert!(a.get("SRC_A-3000").is_ok());
        assert!(a.get("nope").is_err());
    }

    #[test]
    fn pools_split_by_label() {
        let p = build_pools(&tiny(), 1, ExecMode::Parallel).unwrap();
        assert_eq!(p.labeled.len(), 4);
        assert_eq!(p.unlabeled.len(), 4);
        assert!(p.unlabeled.iter().all(|c| c.mask.is_none()));
        let modalities: std::collections::BTreeSet<_> = p.labeled.iter().map(|c| c.modality).collect();
        assert_eq!(modalities.len(), 2);
    }

    #[test]
    fn pool_names_must_not_collide_with_centers() {
        let mut c = tiny();
        c.pools[0].name = "SRC_A".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        write_corpus(&cfg, 0, dir.path(), ExecMode::Parallel).unwrap();
        let loaded = load_corpus(dir.path(), ExecMode::Parallel).unwrap();
        let built = build_corpus(&cfg, 0, ExecMode::Parallel).unwrap();
        for (x, y) in loaded.cases().zip(built.cases()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.tag, y.tag);
            assert_eq!(x.volume.data(), y.volume.data());
            assert_eq!(x.mask.data(), y.mask.data());
        }
    }
}
