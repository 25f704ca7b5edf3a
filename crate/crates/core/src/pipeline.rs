//! Inspector phases and their on-disk artifacts.
//!
//! Phase one depends on the points and the admissibility setting; phase two
//! on the kernel and accuracy. Each phase writes a JSON manifest holding the
//! SHA-256 of every file it owns plus a hash of its inputs, and loading
//! verifies both, so stale or corrupted artifacts are refused.
//!
//! Layout of an artifact directory:
//!
//! | file            | phase | content                                  |
//! |-----------------|-------|------------------------------------------|
//! | `points.bin`    | 1     | point coordinates                        |
//! | `ctree.bin`     | 1     | cluster tree                             |
//! | `htree.bin`     | 1     | near/far interaction lists               |
//! | `sampling.bin`  | 1     | sample rows per node                     |
//! | `blockset.bin`  | 1     | near and far blocksets                   |
//! | `p1.json`       | 1     | manifest                                 |
//! | `hmat.cds`      | 2     | generators in computation order          |
//! | `coarsenset.bin`| 2     | coarsened schedule                       |
//! | `plan.json`     | 2     | evaluation plan                          |
//! | `p2.json`       | 2     | manifest                                 |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Decoder, Encoder};
use crate::compression::{compress, CompressedMatrix};
use crate::error::{Error, Result};
use crate::executor::Executor;
use crate::interaction::{AdmissibilityMode, HTree};
use crate::kernel::Kernel;
use crate::matrix::DenseMatrix;
use crate::plan::{default_workers, generate_plan, EvalPlan, PlanDefaults};
use crate::points::PointSet;
use crate::reference::{relative_error, ErrorMode};
use crate::sampling::{sample_htree, SampleInfo, SamplingConfig};
use crate::structure::{blocking, coarsening, BlockSet, Cds, CoarsenSet, InteractionKind};
use crate::tree::{ClusterTree, SplitMethod};

const P1_MANIFEST: &str = "p1.json";
const P2_MANIFEST: &str = "p2.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct P1Config {
    pub mode: AdmissibilityMode,
    pub leaf_size: usize,
    pub split: SplitMethod,
    pub tree_seed: u64,
    pub sampling: SamplingConfig,
    pub near_blocksize: usize,
    pub far_blocksize: usize,
}

impl Default for P1Config {
    fn default() -> Self {
        P1Config {
            mode: AdmissibilityMode::Tau(0.65),
            leaf_size: 64,
            split: SplitMethod::Auto,
            tree_seed: 0,
            sampling: SamplingConfig::default(),
            near_blocksize: 2,
            far_blocksize: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct P2Config {
    pub kernel: Kernel,
    pub bacc: f64,
    pub max_rank: usize,
    pub agg: usize,
    /// Right-hand-side width assumed by the coarsening cost model.
    pub cost_q: f64,
    pub plan: PlanDefaults,
}

impl Default for P2Config {
    fn default() -> Self {
        P2Config {
            kernel: Kernel::Gaussian { bandwidth: 1.0 },
            bacc: 1e-5,
            max_rank: 256,
            agg: 2,
            cost_q: 1.0,
            plan: PlanDefaults {
                workers: default_workers(),
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct P1Artifacts {
    pub config: P1Config,
    pub points: PointSet,
    pub htree: HTree,
    pub samples: SampleInfo,
    pub near: BlockSet,
    pub far: BlockSet,
    /// Hash of the inputs (points and configuration).
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct P2Artifacts {
    pub config: P2Config,
    pub p1_hash: String,
    pub cds: Cds,
    pub plan: EvalPlan,
    pub hash: String,
}

impl P2Artifacts {
    pub fn executor(&self) -> Result<Executor> {
        Executor::new(self.cds.clone(), self.plan)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest<C> {
    format_version: u32,
    config: C,
    input_hash: String,
    /// Only set for phase two: the phase-one input hash it was built from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p1_hash: Option<String>,
    files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn config_json<C: Serialize>(c: &C) -> String {
    serde_json::to_string(c).expect("config serializes")
}

/// Hash identifying a phase-one run.
pub fn p1_input_hash(points: &PointSet, cfg: &P1Config) -> String {
    let mut bytes = points.to_bytes();
    bytes.extend_from_slice(config_json(cfg).as_bytes());
    sha256_hex(&bytes)
}

fn p2_input_hash(p1_hash: &str, cfg: &P2Config) -> String {
    sha256_hex(format!("{p1_hash}\n{}", config_json(cfg)).as_bytes())
}

pub fn inspector_p1(points: &PointSet, cfg: &P1Config) -> Result<P1Artifacts> {
    let tree = ClusterTree::build(points, cfg.leaf_size, cfg.split, cfg.tree_seed)?;
    let htree = HTree::build(points, tree, cfg.mode)?;
    let samples = sample_htree(points, &htree, &cfg.sampling)?;
    let near = blocking(&htree, cfg.near_blocksize, InteractionKind::Near)?;
    let far = blocking(&htree, cfg.far_blocksize, InteractionKind::Far)?;
    log::info!(
        "phase one: {} nodes, {} near / {} far pairs",
        htree.num_nodes(),
        htree.num_near(),
        htree.num_far()
    );
    Ok(P1Artifacts {
        config: *cfg,
        points: points.clone(),
        htree,
        samples,
        near,
        far,
        hash: p1_input_hash(points, cfg),
    })
}

/// Phase two, also returning the compressed matrix it laid out.
pub fn inspector_p2_full(p1: &P1Artifacts, cfg: &P2Config) -> Result<(P2Artifacts, CompressedMatrix)> {
    let cm = compress(&p1.htree, cfg.kernel, &p1.points, &p1.samples, cfg.bacc, cfg.max_rank)?;
    let sranks = cm.srank_vector();
    let tree = &p1.htree.tree;
    let coarsen = coarsening(tree, &sranks, &p1.htree.participating(), cfg.plan.workers.max(1), cfg.agg, cfg.cost_q)?;
    let cds = Cds::build(&cm, p1.points.dim(), &p1.near, &p1.far, &coarsen)?;
    let plan = generate_plan(&p1.near, &p1.far, &coarsen, tree, &cfg.plan)?;
    let art = P2Artifacts {
        config: *cfg,
        p1_hash: p1.hash.clone(),
        cds,
        plan,
        hash: p2_input_hash(&p1.hash, cfg),
    };
    Ok((art, cm))
}

pub fn inspector_p2(p1: &P1Artifacts, cfg: &P2Config) -> Result<P2Artifacts> {
    inspector_p2_full(p1, cfg).map(|(a, _)| a)
}

fn write(dir: &Path, name: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    files.insert(name.to_string(), sha256_hex(bytes));
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    std::fs::read(&path).map_err(|e| Error::io(&path, e))
}

fn read_manifest<C: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<Manifest<C>> {
    let bytes = read(dir, name)?;
    let m: Manifest<C> = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(name).display())))?;
    if m.format_version != crate::codec::FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{name}: format version {} is not supported (expected {})",
            m.format_version,
            crate::codec::FORMAT_VERSION
        )));
    }
    Ok(m)
}

/// Reads every file of a manifest, checking its hash.
fn verified_files(dir: &Path, files: &BTreeMap<String, String>, phase: &str) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for (name, want) in files {
        let bytes = read(dir, name)?;
        if &sha256_hex(&bytes) != want {
            return Err(Error::Consistency(format!(
                "{} changed since it was written; rerun {phase}",
                dir.join(name).display()
            )));
        }
        out.insert(name.clone(), bytes);
    }
    Ok(out)
}

fn take(files: &mut BTreeMap<String, Vec<u8>>, name: &str) -> Result<Vec<u8>> {
    files
        .remove(name)
        .ok_or_else(|| Error::Format(format!("manifest does not list {name}")))
}

impl P1Artifacts {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        write(dir, "points.bin", &self.points.to_bytes(), &mut files)?;
        let mut e = Encoder::new(b"CTRE");
        self.htree.tree.encode(&mut e);
        write(dir, "ctree.bin", &e.finish(), &mut files)?;
        let mut e = Encoder::new(b"HTRE");
        self.htree.encode(&mut e);
        write(dir, "htree.bin", &e.finish(), &mut files)?;
        let mut e = Encoder::new(b"SMPL");
        self.samples.encode(&mut e);
        write(dir, "sampling.bin", &e.finish(), &mut files)?;
        let mut e = Encoder::new(b"BLKS");
        self.near.encode(&mut e);
        self.far.encode(&mut e);
        write(dir, "blockset.bin", &e.finish(), &mut files)?;
        let m = Manifest {
            format_version: crate::codec::FORMAT_VERSION,
            config: self.config,
            input_hash: self.hash.clone(),
            p1_hash: None,
            files,
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        let path = dir.join(P1_MANIFEST);
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest<P1Config> = read_manifest(dir, P1_MANIFEST)?;
        let mut files = verified_files(dir, &m.files, "phase one")?;
        let points = PointSet::from_bytes(&take(&mut files, "points.bin")?)?;
        if p1_input_hash(&points, &m.config) != m.input_hash {
            return Err(Error::Consistency("phase-one inputs do not match the manifest; rerun phase one".into()));
        }
        let bytes = take(&mut files, "ctree.bin")?;
        let mut d = Decoder::new(&bytes, b"CTRE", "ctree")?;
        let tree = ClusterTree::decode(&mut d)?;
        d.finish()?;
        let bytes = take(&mut files, "htree.bin")?;
        let mut d = Decoder::new(&bytes, b"HTRE", "htree")?;
        let htree = HTree::decode(&mut d)?;
        d.finish()?;
        if htree.tree != tree || tree.num_points() != points.len() {
            return Err(Error::Consistency("ctree.bin and htree.bin disagree; rerun phase one".into()));
        }
        let bytes = take(&mut files, "sampling.bin")?;
        let mut d = Decoder::new(&bytes, b"SMPL", "sampling")?;
        let samples = SampleInfo::decode(&mut d)?;
        d.finish()?;
        let bytes = take(&mut files, "blockset.bin")?;
        let mut d = Decoder::new(&bytes, b"BLKS", "blockset")?;
        let near = BlockSet::decode(&mut d)?;
        let far = BlockSet::decode(&mut d)?;
        d.finish()?;
        Ok(P1Artifacts {
            config: m.config,
            points,
            htree,
            samples,
            near,
            far,
            hash: m.input_hash,
        })
    }
}

impl P2Artifacts {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        write(dir, "hmat.cds", &self.cds.to_bytes(), &mut files)?;
        let mut e = Encoder::new(b"CRSN");
        self.cds.coarsen.encode(&mut e);
        write(dir, "coarsenset.bin", &e.finish(), &mut files)?;
        write(dir, "plan.json", self.plan.to_json().as_bytes(), &mut files)?;
        let m = Manifest {
            format_version: crate::codec::FORMAT_VERSION,
            config: self.config,
            input_hash: self.hash.clone(),
            p1_hash: Some(self.p1_hash.clone()),
            files,
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        let path = dir.join(P2_MANIFEST);
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads phase-two artifacts, refusing them if the phase-one manifest in
    /// the same directory no longer matches the one they were built from.
    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest<P2Config> = read_manifest(dir, P2_MANIFEST)?;
        let p1_hash = m
            .p1_hash
            .clone()
            .ok_or_else(|| Error::Format("p2.json lacks the phase-one hash".into()))?;
        let p1: Manifest<P1Config> = read_manifest(dir, P1_MANIFEST)?;
        if p1.input_hash != p1_hash {
            return Err(Error::Consistency(
                "phase-two artifacts were built from different phase-one artifacts; rerun phase two".into(),
            ));
        }
        if p2_input_hash(&p1_hash, &m.config) != m.input_hash {
            return Err(Error::Consistency("p2.json was edited; rerun phase two".into()));
        }
        let mut files = verified_files(dir, &m.files, "phase two")?;
        let cds = Cds::from_bytes(&take(&mut files, "hmat.cds")?)?;
        let bytes = take(&mut files, "coarsenset.bin")?;
        let mut d = Decoder::new(&bytes, b"CRSN", "coarsenset")?;
        let coarsen = CoarsenSet::decode(&mut d)?;
        d.finish()?;
        if coarsen != cds.coarsen {
            return Err(Error::Consistency("coarsenset.bin and hmat.cds disagree; rerun phase two".into()));
        }
        let plan_text = String::from_utf8(take(&mut files, "plan.json")?)
            .map_err(|_| Error::Format("plan.json is not UTF-8".into()))?;
        let plan = EvalPlan::from_json(&plan_text)?;
        Ok(P2Artifacts {
            config: m.config,
            p1_hash,
            cds,
            plan,
            hash: m.input_hash,
        })
    }
}

/// Outcome of [`run_inspector`].
#[derive(Debug)]
pub struct InspectOutcome {
    pub p1: P1Artifacts,
    pub p2: P2Artifacts,
    /// Phase one was loaded from disk instead of recomputed.
    pub reused_p1: bool,
    pub p1_time: Duration,
    pub p2_time: Duration,
}

/// Both inspector phases into `dir`. With `reuse`, phase one is loaded when
/// `dir` already holds artifacts for the same points and configuration.
pub fn run_inspector(points: &PointSet, p1_cfg: &P1Config, p2_cfg: &P2Config, dir: &Path, reuse: bool) -> Result<InspectOutcome> {
    let t0 = Instant::now();
    let existing = if reuse && dir.join(P1_MANIFEST).exists() {
        let m: Manifest<P1Config> = read_manifest(dir, P1_MANIFEST)?;
        (m.input_hash == p1_input_hash(points, p1_cfg)).then_some(())
    } else {
        None
    };
    let (p1, reused_p1) = match existing {
        Some(()) => (P1Artifacts::load(dir)?, true),
        None => {
            let p1 = inspector_p1(points, p1_cfg)?;
            p1.save(dir)?;
            (p1, false)
        }
    };
    let p1_time = t0.elapsed();
    let t0 = Instant::now();
    let p2 = inspector_p2(&p1, p2_cfg)?;
    p2.save(dir)?;
    let p2_time = t0.elapsed();
    Ok(InspectOutcome {
        p1,
        p2,
        reused_p1,
        p1_time,
        p2_time,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub bacc: f64,
    pub error: f64,
    pub p2_time: Duration,
    pub eval_time: Duration,
    pub error_time: Duration,
    pub max_srank: usize,
}

/// Phase two and one evaluation per accuracy, reusing `p1`.
pub fn accuracy_sweep(p1: &P1Artifacts, base: &P2Config, baccs: &[f64], w: &DenseMatrix, mode: ErrorMode) -> Result<Vec<SweepRow>> {
    baccs
        .iter()
        .map(|&bacc| {
            let t0 = Instant::now();
            let p2 = inspector_p2(p1, &P2Config { bacc, ..*base })?;
            let p2_time = t0.elapsed();
            let exec = p2.executor()?;
            let t0 = Instant::now();
            let y = exec.evaluate(w)?;
            let eval_time = t0.elapsed();
            let t0 = Instant::now();
            let error = relative_error(&y, &base.kernel, &p1.points, w, mode)?;
            Ok(SweepRow {
                bacc,
                error,
                p2_time,
                eval_time,
                error_time: t0.elapsed(),
                max_srank: p2.cds.sranks.iter().copied().max().unwrap_or(0),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("bacc,error,p2_seconds,eval_seconds,error_seconds,max_srank\n");
    for r in rows {
        s.push_str(&format!(
            "{:e},{:e},{:.6},{:.6},{:.6},{}\n",
            r.bacc,
            r.error,
            r.p2_time.as_secs_f64(),
            r.eval_time.as_secs_f64(),
            r.error_time.as_secs_f64(),
            r.max_srank
        ));
    }
    s
}

/// Path of a phase's manifest inside an artifact directory.
pub fn manifest_path(dir: &Path, phase: u8) -> PathBuf {
    dir.join(if phase == 1 { P1_MANIFEST } else { P2_MANIFEST })
}
