//! Deterministic synthetic data engine: scene synthesis, instruction
//! composition, symbolic ground-truth resolution, quality filtering, and
//! train/val/test split emission.

pub mod instruction;
pub mod scene;
pub mod vocab;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mask::Mask;
use crate::metrics::Stratum;
use crate::rng::Rng;
use crate::{Error, Result};
use instruction::{all_selectors, ExceptPred, InstructionSpec, Modifier};
use scene::{PlacedObject, Scene, COLORS, SHAPES};

/// Which instruction templates a split may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModifierSet {
    /// Plain `All` selectors only (referring-alignment data).
    AllOnly,
    /// The full template family including exclusion, counting, and spatial
    /// superlatives (reasoning data).
    Full,
}

/// Engine settings shared by every split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenSettings {
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_min_objects")]
    pub min_objects: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    /// Instance cap: scenes resolving to more targets than this are
    /// rejected (matches the model's slot count).
    #[serde(default = "default_query_capacity")]
    pub query_capacity: usize,
    /// Stratum mix (single, multi, no-target).
    #[serde(default = "default_mix")]
    pub mix: [f64; 3],
    /// Fraction of samples whose labels get synthetically corrupted before
    /// the filter stage (emulates annotation-engine noise).
    #[serde(default)]
    pub corrupt_fraction: f64,
    /// Whether the filter stage runs.
    #[serde(default = "default_true")]
    pub filtering: bool,
    #[serde(default = "default_counts")]
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitCounts {
    pub stage1: usize,
    pub stage2: usize,
    pub val: usize,
    pub test: usize,
}

fn default_grid() -> usize {
    8
}
fn default_min_objects() -> usize {
    2
}
fn default_max_objects() -> usize {
    6
}
fn default_query_capacity() -> usize {
    10
}
fn default_mix() -> [f64; 3] {
    [0.5, 0.35, 0.15]
}
fn default_true() -> bool {
    true
}
fn default_counts() -> SplitCounts {
    SplitCounts { stage1: 1000, stage2: 1000, val: 150, test: 300 }
}

impl Default for GenSettings {
    fn default() -> Self {
        GenSettings {
            grid: default_grid(),
            min_objects: default_min_objects(),
            max_objects: default_max_objects(),
            query_capacity: default_query_capacity(),
            mix: default_mix(),
            corrupt_fraction: 0.0,
            filtering: true,
            counts: default_counts(),
        }
    }
}

/// One benchmark sample. `objects` carries the generator's placement list;
/// it is not serialized and is empty after loading from disk.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub id: u64,
    pub grid_side: usize,
    /// Row-major cell attribute ids.
    pub grid: Vec<u8>,
    pub instruction: Vec<u32>,
    pub instruction_text: String,
    pub phrase: Vec<u32>,
    pub gt_masks: Vec<Mask>,
    pub stratum: Stratum,
    pub objects: Vec<PlacedObject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: u64,
    grid: Vec<Vec<u8>>,
    instruction: Vec<u32>,
    instruction_text: String,
    phrase: Vec<u32>,
    masks: Vec<String>,
    stratum: Stratum,
}

impl SceneSample {
    fn to_record(&self) -> SampleRecord {
        let side = self.grid_side;
        SampleRecord {
            id: self.id,
            grid: (0..side).map(|r| self.grid[r * side..(r + 1) * side].to_vec()).collect(),
            instruction: self.instruction.clone(),
            instruction_text: self.instruction_text.clone(),
            phrase: self.phrase.clone(),
            masks: self.gt_masks.iter().map(Mask::to_rle).collect(),
            stratum: self.stratum,
        }
    }

    fn from_record(record: SampleRecord) -> Result<Self> {
        let side = record.grid.len();
        let mut grid = Vec::with_capacity(side * side);
        for row in &record.grid {
            if row.len() != side {
                return Err(Error::Dataset(format!("sample {}: ragged grid", record.id)));
            }
            grid.extend_from_slice(row);
        }
        let gt_masks = record
            .masks
            .iter()
            .map(|rle| Mask::from_rle(side, rle))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneSample {
            id: record.id,
            grid_side: side,
            grid,
            instruction: record.instruction,
            instruction_text: record.instruction_text,
            phrase: record.phrase,
            gt_masks,
            stratum: record.stratum,
            objects: Vec::new(),
        })
    }
}

/// Filter decision with the rejection reason, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutcome {
    pub accept: bool,
    pub reason: Option<&'static str>,
}

impl FilterOutcome {
    fn accept() -> Self {
        FilterOutcome { accept: true, reason: None }
    }
    fn reject(reason: &'static str) -> Self {
        FilterOutcome { accept: false, reason: Some(reason) }
    }
}

/// Quality filter: capacity, degenerate masks, re-resolution consistency,
/// and per-scene duplicate instructions.
pub fn filter_sample(
    sample: &SceneSample,
    capacity: usize,
    prior_instructions: &[String],
) -> FilterOutcome {
    if sample.gt_masks.len() > capacity {
        return FilterOutcome::reject("over-capacity");
    }
    if sample.gt_masks.iter().any(|m| m.count_ones() < 1) {
        return FilterOutcome::reject("empty-mask");
    }
    if prior_instructions.contains(&sample.instruction_text) {
        return FilterOutcome::reject("duplicate-instruction");
    }
    // Consistency: re-parse the rendered instruction and re-resolve against
    // the scene; the stored masks must match exactly.
    if !sample.objects.is_empty() || sample.gt_masks.is_empty() {
        let scene = Scene {
            side: sample.grid_side,
            cells: sample.grid.clone(),
            objects: sample.objects.clone(),
        };
        match InstructionSpec::parse(&sample.instruction) {
            Ok(spec) => {
                let selected = spec.resolve(&scene);
                let expect: Vec<Mask> = selected
                    .iter()
                    .map(|&i| Mask::from_cells(scene.side, &scene.objects[i].cells))
                    .collect();
                if expect != sample.gt_masks {
                    return FilterOutcome::reject("inconsistent");
                }
            }
            Err(_) => return FilterOutcome::reject("unparseable"),
        }
    }
    FilterOutcome::accept()
}

/// Candidate instructions on `scene` that resolve to the requested stratum.
///
/// Superlative and counting templates are only emitted when the scene makes
/// them unambiguous: unique extreme column, unique largest size, or a strict
/// size gap at the count boundary.
fn candidate_specs(
    scene: &Scene,
    modifiers: ModifierSet,
    stratum: Stratum,
    capacity: usize,
) -> Vec<InstructionSpec> {
    let side = scene.side;
    let mut out = Vec::new();
    for sel in all_selectors() {
        let matches: Vec<&PlacedObject> =
            scene.objects.iter().filter(|o| sel.matches(o)).collect();
        let n = matches.len();
        // Plain `All` (and its no-target twin).
        let all_stratum = Stratum::from_target_count(n);
        if n <= capacity && all_stratum == stratum {
            let modifier = if n == 0 { Modifier::NoneMatching } else { Modifier::All };
            out.push(InstructionSpec { selector: sel, modifier });
        }
        if modifiers == ModifierSet::AllOnly {
            continue;
        }
        if n >= 2 && stratum == Stratum::SingleTarget {
            // Leftmost / Rightmost need a unique extreme column.
            let cols: Vec<usize> = matches.iter().map(|o| o.col_key(side)).collect();
            let min = *cols.iter().min().unwrap();
            let max = *cols.iter().max().unwrap();
            if cols.iter().filter(|&&c| c == min).count() == 1 {
                out.push(InstructionSpec { selector: sel, modifier: Modifier::Leftmost });
            }
            if cols.iter().filter(|&&c| c == max).count() == 1 && max != min {
                out.push(InstructionSpec { selector: sel, modifier: Modifier::Rightmost });
            }
            // Largest needs a unique maximum size.
            let mut sizes: Vec<usize> = matches.iter().map(|o| o.cell_count()).collect();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            if sizes[0] > sizes[1] {
                out.push(InstructionSpec { selector: sel, modifier: Modifier::Largest });
            }
        }
        if stratum == Stratum::MultiTarget {
            // CountK needs a strict size gap below the cut.
            for k in [2usize, 3] {
                if n > k {
                    let mut sizes: Vec<usize> = matches.iter().map(|o| o.cell_count()).collect();
                    sizes.sort_unstable_by(|a, b| b.cmp(a));
                    if sizes[k - 1] > sizes[k] {
                        out.push(InstructionSpec { selector: sel, modifier: Modifier::CountK(k) });
                    }
                }
            }
        }
        // Exclusion over the selector's free axis.
        let except_preds: Vec<ExceptPred> = match (sel.color, sel.shape) {
            (None, Some(_)) => COLORS.iter().map(|&c| ExceptPred::Color(c)).collect(),
            (Some(_), None) => SHAPES.iter().map(|&s| ExceptPred::Shape(s)).collect(),
            _ => Vec::new(),
        };
        for pred in except_preds {
            let excluded = matches
                .iter()
                .filter(|o| match pred {
                    ExceptPred::Color(c) => o.color == c,
                    ExceptPred::Shape(s) => o.shape == s,
                })
                .count();
            let remaining = n - excluded;
            if excluded == 0 || remaining == 0 || remaining > capacity {
                continue;
            }
            if Stratum::from_target_count(remaining) == stratum {
                out.push(InstructionSpec { selector: sel, modifier: Modifier::Except(pred) });
            }
        }
    }
    out
}

fn build_sample(id: u64, scene: Scene, spec: InstructionSpec) -> SceneSample {
    let selected = spec.resolve(&scene);
    let gt_masks: Vec<Mask> = selected
        .iter()
        .map(|&i| Mask::from_cells(scene.side, &scene.objects[i].cells))
        .collect();
    let instruction = spec.render();
    SceneSample {
        id,
        grid_side: scene.side,
        grid: scene.cells.clone(),
        instruction_text: spec.render_text(),
        instruction,
        phrase: spec.phrase_tokens(),
        stratum: Stratum::from_target_count(gt_masks.len()),
        gt_masks,
        objects: scene.objects,
    }
}

/// In-place label corruption: drop a mask, shift one by a column, or add a
/// spurious one. The stratum is kept in sync with the corrupted count.
fn corrupt_sample(sample: &mut SceneSample, rng: &mut Rng) {
    let side = sample.grid_side;
    let n = sample.gt_masks.len();
    let mode = rng.below(3);
    match mode {
        0 if n >= 1 => {
            let victim = rng.below(n);
            sample.gt_masks.remove(victim);
        }
        1 if n >= 1 => {
            let victim = rng.below(n);
            let old = sample.gt_masks[victim].clone();
            let mut shifted = Mask::empty(side);
            for idx in old.one_indices() {
                let (r, c) = (idx / side, idx % side);
                let nc = if c + 1 < side { c + 1 } else { c - 1 };
                shifted.set(r, nc, true);
            }
            sample.gt_masks[victim] = shifted;
        }
        _ => {
            // Spurious extra mask: an unselected object if one exists, else
            // a random cell.
            let selected_cells: Vec<Vec<usize>> =
                sample.gt_masks.iter().map(|m| m.one_indices()).collect();
            let extra = sample
                .objects
                .iter()
                .find(|o| !selected_cells.contains(&o.cells))
                .map(|o| Mask::from_cells(side, &o.cells))
                .unwrap_or_else(|| Mask::from_cells(side, &[rng.below(side * side)]));
            sample.gt_masks.push(extra);
        }
    }
    sample.stratum = Stratum::from_target_count(sample.gt_masks.len());
}

/// Counters describing one generation run.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GenStats {
    pub accepted: usize,
    pub filter_rejections: usize,
}

/// Per-split generation parameters.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub modifiers: ModifierSet,
    pub include_no_target: bool,
}

/// Exact-proportion stratum schedule (largest-remainder, fixed tie order).
fn stratum_schedule(count: usize, mix: [f64; 3], include_no_target: bool) -> Vec<Stratum> {
    let fracs = if include_no_target {
        mix
    } else {
        let s = mix[0] + mix[1];
        [mix[0] / s, mix[1] / s, 0.0]
    };
    let strata = [Stratum::SingleTarget, Stratum::MultiTarget, Stratum::NoTarget];
    let mut emitted = [0usize; 3];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for s in 0..3 {
            let deficit = fracs[s] * (i + 1) as f64 - emitted[s] as f64;
            if deficit > best_deficit + 1e-12 {
                best_deficit = deficit;
                best = s;
            }
        }
        emitted[best] += 1;
        out.push(strata[best]);
    }
    out
}

/// Generate `count` samples with ids `id_offset..id_offset + count`.
///
/// Each sample draws from the substream `(seed, id)`, so block-parallel
/// generation emits identical bytes in any worker configuration.
pub fn generate_split(
    seed: u64,
    id_offset: u64,
    count: usize,
    settings: &GenSettings,
    split: SplitSpec,
) -> Result<(Vec<SceneSample>, GenStats)> {
    if count == 0 {
        return Err(Error::GenConfig("split count must be at least 1".into()));
    }
    if settings.min_objects < 1 || settings.min_objects > settings.max_objects {
        return Err(Error::GenConfig("object count range is empty".into()));
    }
    // A size-3 object plus margin needs a 4x4 corner; reject configs whose
    // demanded object count cannot fit on the grid even in the best case.
    let cell_budget = (settings.grid / 2) * (settings.grid / 2);
    if settings.max_objects > cell_budget {
        return Err(Error::GenConfig(format!(
            "{} objects cannot fit on a {}x{} grid",
            settings.max_objects, settings.grid, settings.grid
        )));
    }
    let schedule = stratum_schedule(count, settings.mix, split.include_no_target);
    let results: Result<Vec<(SceneSample, usize)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let id = id_offset + i as u64;
            let mut rng = Rng::substream(seed, id);
            let target = schedule[i];
            let mut rejections = 0usize;
            for _attempt in 0..512 {
                let n_objects = rng.range(settings.min_objects, settings.max_objects);
                let Some(scene) = Scene::sample(&mut rng, settings.grid, n_objects) else {
                    continue;
                };
                let cands = candidate_specs(&scene, split.modifiers, target, settings.query_capacity);
                if cands.is_empty() {
                    continue;
                }
                let spec = *rng.choose(&cands);
                let mut sample = build_sample(id, scene, spec);
                if settings.corrupt_fraction > 0.0 && rng.next_f64() < settings.corrupt_fraction {
                    corrupt_sample(&mut sample, &mut rng);
                }
                if settings.filtering {
                    let outcome = filter_sample(&sample, settings.query_capacity, &[]);
                    if !outcome.accept {
                        rejections += 1;
                        continue;
                    }
                }
                return Ok((sample, rejections));
            }
            Err(Error::GenConfig(format!(
                "could not synthesize a {target:?} sample for id {id}; grid too constrained"
            )))
        })
        .collect();
    let results = results?;
    let mut stats = GenStats::default();
    let samples: Vec<SceneSample> = results
        .into_iter()
        .map(|(s, rej)| {
            stats.accepted += 1;
            stats.filter_rejections += rej;
            s
        })
        .collect();
    Ok((samples, stats))
}

/// The four emitted splits.
#[derive(Debug)]
pub struct GeneratedDataset {
    pub stage1: Vec<SceneSample>,
    pub stage2: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
    pub stats: GenStats,
}

/// Generate every split under one seed with pairwise-disjoint ids.
///
/// Stage 1 holds alignment data (plain `All` templates, no no-target);
/// stage 2 holds the full template family (still no no-target, matching the
/// zero-shot evaluation protocol); val/test mix every stratum.
pub fn generate_dataset(seed: u64, settings: &GenSettings) -> Result<GeneratedDataset> {
    let c = settings.counts;
    let mut offset = 0u64;
    let mut stats = GenStats::default();
    let mut take = |count: usize, split: SplitSpec, stats: &mut GenStats| -> Result<Vec<SceneSample>> {
        let (samples, s) = generate_split(seed, offset, count, settings, split)?;
        offset += count as u64;
        stats.accepted += s.accepted;
        stats.filter_rejections += s.filter_rejections;
        Ok(samples)
    };
    let stage1 = take(
        c.stage1,
        SplitSpec { modifiers: ModifierSet::AllOnly, include_no_target: false },
        &mut stats,
    )?;
    let stage2 = take(
        c.stage2,
        SplitSpec { modifiers: ModifierSet::Full, include_no_target: false },
        &mut stats,
    )?;
    let val = take(
        c.val,
        SplitSpec { modifiers: ModifierSet::Full, include_no_target: true },
        &mut stats,
    )?;
    let test = take(
        c.test,
        SplitSpec { modifiers: ModifierSet::Full, include_no_target: true },
        &mut stats,
    )?;
    Ok(GeneratedDataset { stage1, stage2, val, test, stats })
}

pub fn write_jsonl(path: &Path, samples: &[SceneSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, &s.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SceneSample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleRecord = serde_json::from_str(&line)?;
        out.push(SceneSample::from_record(record)?);
    }
    Ok(out)
}

/// Write all four splits plus the vocabulary sidecar.
pub fn write_dataset(dir: &Path, dataset: &GeneratedDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("train_stage1.jsonl"), &dataset.stage1)?;
    write_jsonl(&dir.join("train_stage2.jsonl"), &dataset.stage2)?;
    write_jsonl(&dir.join("val.jsonl"), &dataset.val)?;
    write_jsonl(&dir.join("test.jsonl"), &dataset.test)?;
    let vocab = serde_json::to_string_pretty(&vocab::VocabFile::current())?;
    std::fs::write(dir.join("vocab.json"), vocab + "\n")?;
    Ok(())
}
