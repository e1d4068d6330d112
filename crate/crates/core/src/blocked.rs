//! Cache-aware blocked Gaussian-to-voxel splatting.
//!
//! The grid is tiled into 4x4x4 voxel blocks. The forward pass parallelizes
//! over blocks: each block stages its interacting Gaussians once and
//! accumulates into a small block-local working set that stays cache
//! resident (the CPU analog of staging Gaussians into shared memory). The
//! backward pass parallelizes over Gaussians: each worker owns one Gaussian's
//! gradient row and walks that Gaussian's touched voxels through the
//! neighbor-index transpose, so no two workers ever write the same
//! accumulator and no atomics are needed.
//!
//! Per voxel, Gaussians are visited in ascending id order in both passes, so
//! results are bit-identical across runs and worker counts and match the
//! naive kernels in [`crate::splat`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::{
    self, eval_pair, pair_chain, NeighborIndex, PairAccum, PairEval, Prepared, SplatConfig,
    SplatGradients,
};
use crate::types::{OccupancyField, SemanticGaussian, VoxelGrid};

pub const BLOCK_EDGE: usize = 4;
pub const BLOCK_VOL: usize = BLOCK_EDGE * BLOCK_EDGE * BLOCK_EDGE;

/// 4x4x4 voxel blocks tiling the grid, each with the deduplicated, ascending
/// list of Gaussians interacting with any of its voxels.
#[derive(Debug, Clone)]
pub struct VoxelBlockPartition {
    /// Block tile edge per axis (4, partial at grid edges).
    pub block_dims: [usize; 3],
    /// Number of blocks per axis.
    pub blocks: [usize; 3],
    pub offsets: Vec<usize>,
    pub ids: Vec<u32>,
}

impl VoxelBlockPartition {
    pub fn block_count(&self) -> usize {
        self.blocks[0] * self.blocks[1] * self.blocks[2]
    }

    #[inline]
    pub fn gaussians_of(&self, block: usize) -> &[u32] {
        &self.ids[self.offsets[block]..self.offsets[block + 1]]
    }

    #[inline]
    pub fn block_coords(&self, block: usize) -> [usize; 3] {
        let bx = block % self.blocks[0];
        let by = (block / self.blocks[0]) % self.blocks[1];
        let bz = block / (self.blocks[0] * self.blocks[1]);
        [bx, by, bz]
    }

    /// Block-major slot of a voxel: `block * BLOCK_VOL + local`.
    #[inline]
    pub fn slot_of(&self, i: usize, j: usize, k: usize) -> usize {
        let block =
            i / BLOCK_EDGE + self.blocks[0] * (j / BLOCK_EDGE + self.blocks[1] * (k / BLOCK_EDGE));
        let local = (i % BLOCK_EDGE) + BLOCK_EDGE * ((j % BLOCK_EDGE) + BLOCK_EDGE * (k % BLOCK_EDGE));
        block * BLOCK_VOL + local
    }
}

/// Tiles the grid into 4x4x4 blocks and stages, per block, the sorted
/// deduplicated union of its voxels' neighbor lists.
///
/// Built gaussian-major over the transpose: walking gaussians in ascending
/// id order leaves every block list sorted and deduplicated without any
/// sorting, using a per-block last-seen stamp.
pub fn partition(grid: &VoxelGrid, index: &NeighborIndex) -> VoxelBlockPartition {
    let blocks = [
        grid.dims[0].div_ceil(BLOCK_EDGE),
        grid.dims[1].div_ceil(BLOCK_EDGE),
        grid.dims[2].div_ceil(BLOCK_EDGE),
    ];
    let block_count = blocks[0] * blocks[1] * blocks[2];
    let gaussian_count = index.g2v_offsets.len() - 1;
    let mut stamp = vec![u32::MAX; block_count];
    let mut counts = vec![0usize; block_count];
    let block_of = |v: usize| -> usize {
        let i = v % grid.dims[0];
        let j = (v / grid.dims[0]) % grid.dims[1];
        let k = v / (grid.dims[0] * grid.dims[1]);
        i / BLOCK_EDGE + blocks[0] * (j / BLOCK_EDGE + blocks[1] * (k / BLOCK_EDGE))
    };
    for g in 0..gaussian_count {
        for &v in index.voxels_of(g) {
            let b = block_of(v as usize);
            if stamp[b] != g as u32 {
                stamp[b] = g as u32;
                counts[b] += 1;
            }
        }
    }
    let mut offsets = Vec::with_capacity(block_count + 1);
    let mut total = 0usize;
    offsets.push(0);
    for &c in &counts {
        total += c;
        offsets.push(total);
    }
    let mut cursor: Vec<usize> = offsets[..block_count].to_vec();
    let mut ids = vec![0u32; total];
    stamp.iter_mut().for_each(|s| *s = u32::MAX);
    for g in 0..gaussian_count {
        for &v in index.voxels_of(g) {
            let b = block_of(v as usize);
            if stamp[b] != g as u32 {
                stamp[b] = g as u32;
                ids[cursor[b]] = g as u32;
                cursor[b] += 1;
            }
        }
    }
    VoxelBlockPartition {
        block_dims: [BLOCK_EDGE; 3],
        blocks,
        offsets,
        ids,
    }
}

/// Block-major accumulators produced by the forward sweep. Slots of partial
/// edge blocks beyond the grid stay at their neutral values.
struct BlockAccums {
    /// prod(1 - alpha_i), init 1.
    complement: Vec<f64>,
    /// Mixture denominator, init 0.
    denom: Vec<f64>,
    /// Mixture numerator, stride `class_count`, init 0.
    numerator: Vec<f64>,
    /// Accepted pair visits per block.
    visits: Vec<u64>,
}

fn sweep(
    prepared: &Prepared,
    part: &VoxelBlockPartition,
    index: &NeighborIndex,
    grid: &VoxelGrid,
    cfg: &SplatConfig,
) -> BlockAccums {
    let c = prepared.class_count;
    let nb = part.block_count();
    let n = prepared.len();
    let mut acc = BlockAccums {
        complement: vec![1.0; nb * BLOCK_VOL],
        denom: vec![0.0; nb * BLOCK_VOL],
        numerator: vec![0.0; nb * BLOCK_VOL * c],
        visits: vec![0; nb],
    };
    let dims = grid.dims;
    // Per-block staging layout: mean(3), rot(9), inv_s2(3), opacity, norm,
    // classes(C). Each worker keeps an id-to-slot remap; only ids present in
    // the current block's staged list are ever looked up, so entries left by
    // earlier blocks can never be read stale.
    let stride = 17 + c;
    let weighted = cfg.opacity_weighted;
    acc.complement
        .par_chunks_mut(BLOCK_VOL)
        .zip(acc.denom.par_chunks_mut(BLOCK_VOL))
        .zip(acc.numerator.par_chunks_mut(BLOCK_VOL * c))
        .zip(acc.visits.par_iter_mut())
        .enumerate()
        .for_each_init(
            || (Vec::<f64>::new(), vec![0u32; n], vec![0.0f64; c]),
            |(packed, remap, num), (b, (((complement, denom), numerator), visits))| {
                let [bx, by, bz] = part.block_coords(b);
                let lo = [bx * BLOCK_EDGE, by * BLOCK_EDGE, bz * BLOCK_EDGE];
                let hi = [
                    ((bx + 1) * BLOCK_EDGE).min(dims[0]),
                    ((by + 1) * BLOCK_EDGE).min(dims[1]),
                    ((bz + 1) * BLOCK_EDGE).min(dims[2]),
                ];
                packed.clear();
                for (slot, &gi) in part.gaussians_of(b).iter().enumerate() {
                    let g = gi as usize;
                    remap[g] = slot as u32;
                    packed.extend_from_slice(&prepared.mean[g]);
                    packed.extend_from_slice(&prepared.rot[g]);
                    packed.extend_from_slice(&prepared.inv_s2[g]);
                    packed.push(prepared.opacity[g]);
                    packed.push(prepared.norm_const[g]);
                    packed.extend_from_slice(&prepared.classes[g * c..(g + 1) * c]);
                }
                let mut vis = 0u64;
                for k in lo[2]..hi[2] {
                    for j in lo[1]..hi[1] {
                        for i in lo[0]..hi[0] {
                            let list = index.gaussians_of(grid.linear(i, j, k));
                            let l = (i - lo[0])
                                + BLOCK_EDGE * ((j - lo[1]) + BLOCK_EDGE * (k - lo[2]));
                            if list.is_empty() {
                                continue;
                            }
                            let x = grid.center(i, j, k);
                            let mut comp = 1.0f64;
                            let mut den = 0.0f64;
                            num.iter_mut().for_each(|nk| *nk = 0.0);
                            for &gi in list {
                                let s = remap[gi as usize] as usize;
                                let p = &packed[s * stride..(s + 1) * stride];
                                let d = [x.x - p[0], x.y - p[1], x.z - p[2]];
                                // y = R^T d with the row-major R at p[3..12].
                                let y0 = p[3] * d[0] + p[6] * d[1] + p[9] * d[2];
                                let y1 = p[4] * d[0] + p[7] * d[1] + p[10] * d[2];
                                let y2 = p[5] * d[0] + p[8] * d[1] + p[11] * d[2];
                                let q = y0 * y0 * p[12] + y1 * y1 * p[13] + y2 * y2 * p[14];
                                let r = (-0.5 * q).exp();
                                let a = p[15];
                                let alpha_i = if weighted { a * r } else { r };
                                let w = a * p[16] * r;
                                comp *= 1.0 - alpha_i;
                                den += w;
                                for (nk, ck) in num.iter_mut().zip(&p[17..17 + c]) {
                                    *nk += w * ck;
                                }
                            }
                            vis += list.len() as u64;
                            complement[l] = comp;
                            denom[l] = den;
                            numerator[l * c..(l + 1) * c].copy_from_slice(num);
                        }
                    }
                }
                *visits = vis;
            },
        );
    acc
}

fn finalize_field(
    acc: &BlockAccums,
    part: &VoxelBlockPartition,
    grid: &VoxelGrid,
    cfg: &SplatConfig,
) -> OccupancyField {
    let c = grid.class_count;
    let row_len = c + 1;
    let mut data = vec![0.0f32; grid.voxel_count() * row_len];
    data.par_chunks_mut(row_len).enumerate().for_each(|(v, row)| {
        let [i, j, k] = grid.unlinear(v);
        let slot = part.slot_of(i, j, k);
        let alpha = 1.0 - acc.complement[slot];
        let denom = acc.denom[slot];
        if denom >= cfg.weight_floor {
            let num = &acc.numerator[slot * c..(slot + 1) * c];
            for k in 0..c {
                row[k] = (alpha * num[k] / denom) as f32;
            }
        } else {
            let u = alpha / c as f64;
            for k in 0..c {
                row[k] = u as f32;
            }
        }
        row[c] = (1.0 - alpha) as f32;
    });
    OccupancyField {
        dims: grid.dims,
        class_count: c,
        data,
    }
}

/// Voxel-major stash consumed by the Gaussian-parallel backward, interleaved
/// as `[complement, inv_denom, s_dot]` per voxel (`inv_denom` is the
/// reciprocal mixture denominator, 0 below the weight floor; `s_dot` is
/// `<u_fg, e>` with the uniform fallback folded in).
struct Stash {
    rows: Vec<f64>,
}

impl Stash {
    #[inline]
    fn at(&self, voxel: usize) -> [f64; 3] {
        let r = &self.rows[voxel * 3..voxel * 3 + 3];
        [r[0], r[1], r[2]]
    }
}

fn finalize_stash(
    acc: &BlockAccums,
    part: &VoxelBlockPartition,
    grid: &VoxelGrid,
    cfg: &SplatConfig,
    upstream: &[f64],
) -> Stash {
    let c = grid.class_count;
    let voxel_count = grid.voxel_count();
    let mut stash = Stash {
        rows: vec![0.0; voxel_count * 3],
    };
    stash
        .rows
        .par_chunks_mut(3)
        .enumerate()
        .for_each(|(v, row)| {
            let [i, j, k] = grid.unlinear(v);
            let slot = part.slot_of(i, j, k);
            row[0] = acc.complement[slot];
            let denom = acc.denom[slot];
            let u = &upstream[v * (c + 1)..(v + 1) * (c + 1)];
            if denom >= cfg.weight_floor {
                let inv = 1.0 / denom;
                row[1] = inv;
                let num = &acc.numerator[slot * c..(slot + 1) * c];
                row[2] = (0..c).map(|k| u[k] * num[k]).sum::<f64>() * inv;
            } else {
                row[1] = 0.0;
                row[2] = u[..c].iter().sum::<f64>() / c as f64;
            }
        });
    stash
}

/// Shared prepared state for running both passes on one scene. Building the
/// engine runs the pairing, the partition, and the forward sweep once.
pub struct SplatEngine<'g> {
    grid: &'g VoxelGrid,
    cfg: SplatConfig,
    prepared: Prepared,
    pub index: NeighborIndex,
    pub part: VoxelBlockPartition,
    accums: BlockAccums,
}

impl<'g> SplatEngine<'g> {
    pub fn new(
        gaussians: &[SemanticGaussian],
        grid: &'g VoxelGrid,
        cfg: &SplatConfig,
    ) -> Result<Self> {
        let prepared = splat::prepare(gaussians, grid, cfg.cutoff_sigma)?;
        let index = splat::neighbor_pairs_prepared(&prepared, grid);
        let part = partition(grid, &index);
        let accums = sweep(&prepared, &part, &index, grid, cfg);
        Ok(Self {
            grid,
            cfg: *cfg,
            prepared,
            index,
            part,
            accums,
        })
    }

    pub fn field(&self) -> OccupancyField {
        finalize_field(&self.accums, &self.part, self.grid, &self.cfg)
    }

    /// Per-voxel `[alpha * e ; 1 - alpha]` rows in f64, for loss assembly.
    pub fn field_rows_f64(&self) -> Vec<f64> {
        let c = self.grid.class_count;
        let row_len = c + 1;
        let mut rows = vec![0.0f64; self.grid.voxel_count() * row_len];
        rows.par_chunks_mut(row_len).enumerate().for_each(|(v, row)| {
            let [i, j, k] = self.grid.unlinear(v);
            let slot = self.part.slot_of(i, j, k);
            let alpha = 1.0 - self.accums.complement[slot];
            let denom = self.accums.denom[slot];
            if denom >= self.cfg.weight_floor {
                let num = &self.accums.numerator[slot * c..(slot + 1) * c];
                for k in 0..c {
                    row[k] = alpha * num[k] / denom;
                }
            } else {
                let u = alpha / c as f64;
                for k in 0..c {
                    row[k] = u;
                }
            }
            row[c] = 1.0 - alpha;
        });
        rows
    }

    pub fn pair_count(&self) -> usize {
        self.index.pair_count()
    }

    pub fn backward(&self, upstream: &[f64]) -> Result<SplatGradients> {
        self.backward_with_stats(upstream).map(|(g, _)| g)
    }

    pub fn backward_with_stats(&self, upstream: &[f64]) -> Result<(SplatGradients, SplatStats)> {
        splat::validate_upstream(upstream, self.grid)?;
        let stash = finalize_stash(&self.accums, &self.part, self.grid, &self.cfg, upstream);
        Ok(backward_from_stash(
            &self.prepared,
            &self.index,
            &stash,
            self.grid,
            &self.cfg,
            upstream,
        ))
    }
}

/// Visit counters reported by the blocked kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplatStats {
    /// Accepted Gaussian-voxel pair visits.
    pub pair_visits: u64,
}

fn backward_from_stash(
    prepared: &Prepared,
    index: &NeighborIndex,
    stash: &Stash,
    grid: &VoxelGrid,
    cfg: &SplatConfig,
    upstream: &[f64],
) -> (SplatGradients, SplatStats) {
    let n = prepared.len();
    let c = prepared.class_count;
    let mut out = SplatGradients::zeros(n, c);
    let mut visits = vec![0u64; n];
    out.position
        .par_iter_mut()
        .zip(out.rotation.par_iter_mut())
        .zip(out.log_scale.par_iter_mut())
        .zip(out.opacity_logit.par_iter_mut())
        .zip(out.class_logits.par_chunks_mut(c.max(1)))
        .zip(visits.par_iter_mut())
        .enumerate()
        .for_each(|(g, (((((pos, rot), lscale), opa), clg), visits))| {
            let mut pa = PairAccum::default();
            let mut d_classes = vec![0.0f64; c];
            // This worker owns Gaussian g; hoist its parameters out of the
            // voxel loop.
            let m = prepared.mean[g];
            let rm = prepared.rot[g];
            let is2 = prepared.inv_s2[g];
            let a = prepared.opacity[g];
            let norm_const = prepared.norm_const[g];
            let weighted = cfg.opacity_weighted;
            let classes = &prepared.classes[g * c..(g + 1) * c];
            for &vi in index.voxels_of(g) {
                let v = vi as usize;
                let [i, j, k] = grid.unlinear(v);
                let x = grid.center(i, j, k);
                let d = [x.x - m[0], x.y - m[1], x.z - m[2]];
                let y = [
                    rm[0] * d[0] + rm[3] * d[1] + rm[6] * d[2],
                    rm[1] * d[0] + rm[4] * d[1] + rm[7] * d[2],
                    rm[2] * d[0] + rm[5] * d[1] + rm[8] * d[2],
                ];
                let q = y[0] * y[0] * is2[0] + y[1] * y[1] * is2[1] + y[2] * y[2] * is2[2];
                let r = (-0.5 * q).exp();
                let alpha_i = if weighted { a * r } else { r };
                let weight = a * norm_const * r;
                let u = &upstream[v * (c + 1)..(v + 1) * (c + 1)];
                let [complement, inv_denom, s_dot] = stash.at(v);
                let alpha = 1.0 - complement;
                // Leave-one-out product of (1 - alpha_j): divide out this
                // Gaussian's factor; fall back to an explicit product when
                // the factor is too close to zero to divide.
                let own = 1.0 - alpha_i;
                let loo = if own > 1e-12 {
                    complement / own
                } else {
                    let mut p = 1.0;
                    for &other in index.gaussians_of(v) {
                        if other as usize != g {
                            let oe =
                                eval_pair(prepared, other as usize, &x, cfg.opacity_weighted);
                            p *= 1.0 - oe.alpha_i;
                        }
                    }
                    p
                };
                let d_alpha_i = (s_dot - u[c]) * loo;
                let mut d_w = 0.0;
                if inv_denom != 0.0 {
                    let mut dot = 0.0;
                    for k in 0..c {
                        dot += u[k] * classes[k];
                    }
                    d_w = alpha * (dot - s_dot) * inv_denom;
                    let scale = alpha * weight * inv_denom;
                    for k in 0..c {
                        d_classes[k] += scale * u[k];
                    }
                }
                let e = PairEval {
                    d,
                    y,
                    response: r,
                    alpha_i,
                    weight,
                };
                pair_chain(&e, is2, &rm, a, norm_const, weighted, d_alpha_i, d_w, &mut pa);
                *visits += 1;
            }
            splat::chain_to_raw(prepared, g, &pa, &d_classes, pos, rot, lscale, opa, clg);
        });
    let stats = SplatStats {
        pair_visits: visits.iter().sum(),
    };
    (out, stats)
}

/// Blocked forward pass; contract identical to [`splat::splat_forward`].
pub fn splat_forward_blocked(
    gaussians: &[SemanticGaussian],
    grid: &VoxelGrid,
    cfg: &SplatConfig,
) -> Result<OccupancyField> {
    splat_forward_blocked_with_stats(gaussians, grid, cfg).map(|(f, _)| f)
}

pub fn splat_forward_blocked_with_stats(
    gaussians: &[SemanticGaussian],
    grid: &VoxelGrid,
    cfg: &SplatConfig,
) -> Result<(OccupancyField, SplatStats)> {
    let prepared = splat::prepare(gaussians, grid, cfg.cutoff_sigma)?;
    let index = splat::neighbor_pairs_prepared(&prepared, grid);
    let part = partition(grid, &index);
    let acc = sweep(&prepared, &part, &index, grid, cfg);
    let stats = SplatStats {
        pair_visits: acc.visits.iter().sum(),
    };
    Ok((finalize_field(&acc, &part, grid, cfg), stats))
}

/// Blocked backward pass; contract identical to [`splat::splat_backward`].
pub fn splat_backward_blocked(
    gaussians: &[SemanticGaussian],
    grid: &VoxelGrid,
    cfg: &SplatConfig,
    upstream: &[f64],
) -> Result<SplatGradients> {
    splat_backward_blocked_with_stats(gaussians, grid, cfg, upstream).map(|(g, _)| g)
}

pub fn splat_backward_blocked_with_stats(
    gaussians: &[SemanticGaussian],
    grid: &VoxelGrid,
    cfg: &SplatConfig,
    upstream: &[f64],
) -> Result<(SplatGradients, SplatStats)> {
    splat::validate_upstream(upstream, grid)?;
    let prepared = splat::prepare(gaussians, grid, cfg.cutoff_sigma)?;
    let index = splat::neighbor_pairs_prepared(&prepared, grid);
    let part = partition(grid, &index);
    let acc = sweep(&prepared, &part, &index, grid, cfg);
    let stash = finalize_stash(&acc, &part, grid, cfg, upstream);
    Ok(backward_from_stash(
        &prepared, &index, &stash, grid, cfg, upstream,
    ))
}

/// Scene shape for the kernel benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSpec {
    pub gaussians: usize,
    pub grid_dims: [usize; 3],
    pub class_count: usize,
    pub seed: u64,
    /// Gaussian scale range in meters.
    pub scale_range: [f64; 2],
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            gaussians: 9000,
            grid_dims: [200, 200, 16],
            class_count: 4,
            seed: 7,
            scale_range: [0.25, 0.9],
        }
    }
}

/// Timing report of the four kernels, medians over `repetitions` runs.
/// Pair determination is shared setup; the block partition is timed
/// separately since, like the pair index, it is derived once per scene
/// update and shared by both blocked passes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub gaussians: usize,
    pub grid_dims: [usize; 3],
    pub voxels: usize,
    pub pair_count: usize,
    pub threads: usize,
    pub repetitions: usize,
    pub partition_ms: f64,
    pub naive_fwd_ms: f64,
    pub blocked_fwd_ms: f64,
    pub naive_bwd_ms: f64,
    pub blocked_bwd_ms: f64,
    pub speedup_fwd: f64,
    pub speedup_bwd: f64,
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

/// Benchmarks naive vs blocked forward and backward on a random scene.
/// Pairing and preparation are shared setup and excluded from the timings;
/// the blocked timings include the block partition.
pub fn bench(spec: &BenchSpec, repetitions: usize, cfg: &SplatConfig) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::InsufficientRepetitions(repetitions));
    }
    let grid = VoxelGrid::empty(
        nalgebra::Vector3::new(0.0, 0.0, 0.0),
        nalgebra::Vector3::new(0.5, 0.5, 0.5),
        spec.grid_dims,
        spec.class_count,
    );
    let gaussians = crate::scene::random_gaussians(
        spec.seed,
        spec.gaussians,
        &grid,
        spec.scale_range[0]..spec.scale_range[1],
    );
    let prepared = splat::prepare(&gaussians, &grid, cfg.cutoff_sigma)?;
    let index = splat::neighbor_pairs_prepared(&prepared, &grid);
    let mut rng_state = spec.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let row_len = grid.class_count + 1;
    let upstream: Vec<f64> = (0..grid.voxel_count() * row_len)
        .map(|_| {
            // xorshift64*, plenty for benchmark upstream values
            rng_state ^= rng_state >> 12;
            rng_state ^= rng_state << 25;
            rng_state ^= rng_state >> 27;
            (rng_state.wrapping_mul(0x2545f4914f6cdd1d) >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();

    let time = |f: &mut dyn FnMut()| -> f64 {
        let start = std::time::Instant::now();
        f();
        start.elapsed().as_secs_f64() * 1e3
    };

    let mut partition_times = Vec::with_capacity(repetitions);
    let mut naive_fwd = Vec::with_capacity(repetitions);
    let mut blocked_fwd = Vec::with_capacity(repetitions);
    let mut naive_bwd = Vec::with_capacity(repetitions);
    let mut blocked_bwd = Vec::with_capacity(repetitions);
    let mut part = partition(&grid, &index);
    for _ in 0..repetitions {
        partition_times.push(time(&mut || {
            part = partition(&grid, &index);
        }));
        naive_fwd.push(time(&mut || {
            std::hint::black_box(splat::forward_prepared(&prepared, &index, &grid, cfg));
        }));
        blocked_fwd.push(time(&mut || {
            let acc = sweep(&prepared, &part, &index, &grid, cfg);
            std::hint::black_box(finalize_field(&acc, &part, &grid, cfg));
        }));
        naive_bwd.push(time(&mut || {
            std::hint::black_box(splat::backward_prepared(
                &prepared, &index, &grid, cfg, &upstream,
            ));
        }));
        blocked_bwd.push(time(&mut || {
            let acc = sweep(&prepared, &part, &index, &grid, cfg);
            let stash = finalize_stash(&acc, &part, &grid, cfg, &upstream);
            std::hint::black_box(backward_from_stash(
                &prepared, &index, &stash, &grid, cfg, &upstream,
            ));
        }));
    }
    let partition_ms = median_ms(partition_times);
    let naive_fwd_ms = median_ms(naive_fwd);
    let blocked_fwd_ms = median_ms(blocked_fwd);
    let naive_bwd_ms = median_ms(naive_bwd);
    let blocked_bwd_ms = median_ms(blocked_bwd);
    Ok(BenchReport {
        gaussians: spec.gaussians,
        grid_dims: spec.grid_dims,
        voxels: grid.voxel_count(),
        pair_count: index.pair_count(),
        threads: rayon::current_num_threads(),
        repetitions,
        partition_ms,
        naive_fwd_ms,
        blocked_fwd_ms,
        naive_bwd_ms,
        blocked_bwd_ms,
        speedup_fwd: naive_fwd_ms / blocked_fwd_ms,
        speedup_bwd: naive_bwd_ms / blocked_bwd_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::random_gaussians;
    use crate::splat::{neighbor_pairs, splat_backward, splat_forward};
    use nalgebra::Vector3;

    fn test_grid(dims: [usize; 3], class_count: usize) -> VoxelGrid {
        VoxelGrid::empty(
            Vector3::new(-1.0, -1.0, -0.5),
            Vector3::new(0.5, 0.5, 0.5),
            dims,
            class_count,
        )
    }

    #[test]
    fn block_count_arithmetic() {
        let grid = test_grid([200, 200, 16], 2);
        let index = neighbor_pairs(&[], &grid, 3.0).unwrap();
        let part = partition(&grid, &index);
        assert_eq!(part.blocks, [50, 50, 4]);
        assert_eq!(part.block_count(), 10000);

        let grid = test_grid([7, 5, 3], 2);
        let index = neighbor_pairs(&[], &grid, 3.0).unwrap();
        let part = partition(&grid, &index);
        assert_eq!(part.blocks, [2, 2, 1]);
        assert_eq!(part.block_count(), 4);
    }

    #[test]
    fn block_lists_equal_brute_force_union() {
        let grid = test_grid([11, 9, 6], 3);
        for seed in 0..5 {
            let gaussians = random_gaussians(seed, 30, &grid, 0.2..0.8);
            let index = neighbor_pairs(&gaussians, &grid, 3.0).unwrap();
            let part = partition(&grid, &index);
            // Oracle from the per-Gaussian direction.
            let mut expected: Vec<Vec<u32>> = vec![Vec::new(); part.block_count()];
            for g in 0..gaussians.len() {
                for &v in index.voxels_of(g) {
                    let [i, j, k] = grid.unlinear(v as usize);
                    let b = i / BLOCK_EDGE
                        + part.blocks[0] * (j / BLOCK_EDGE + part.blocks[1] * (k / BLOCK_EDGE));
                    expected[b].push(g as u32);
                }
            }
            for (b, exp) in expected.iter_mut().enumerate() {
                exp.sort_unstable();
                exp.dedup();
                assert_eq!(part.gaussians_of(b), exp.as_slice(), "block {}", b);
            }
        }
    }

    #[test]
    fn blocked_forward_equals_naive() {
        let cfgs = [
            SplatConfig::default(),
            SplatConfig {
                opacity_weighted: false,
                ..SplatConfig::default()
            },
        ];
        for seed in 0..10 {
            let grid = test_grid([9 + (seed as usize % 3), 8, 5], 3);
            let gaussians = random_gaussians(seed, 25, &grid, 0.2..0.8);
            for cfg in &cfgs {
                let naive = splat_forward(&gaussians, &grid, cfg).unwrap();
                let blocked = splat_forward_blocked(&gaussians, &grid, cfg).unwrap();
                assert_eq!(naive.data.len(), blocked.data.len());
                for (a, b) in naive.data.iter().zip(&blocked.data) {
                    assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
                }
            }
        }
    }

    #[test]
    fn blocked_forward_empty_set_is_pure_empty() {
        let grid = test_grid([5, 6, 3], 2);
        let field = splat_forward_blocked(&[], &grid, &SplatConfig::default()).unwrap();
        for v in 0..grid.voxel_count() {
            assert_eq!(field.row(v), &[0.0, 0.0, 1.0]);
        }
    }

    fn random_upstream(seed: u64, len: usize) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
        (0..len)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    #[test]
    fn blocked_backward_equals_naive() {
        for seed in 0..6 {
            let grid = test_grid([8, 7, 5], 3);
            let gaussians = random_gaussians(seed, 20, &grid, 0.2..0.8);
            let cfg = SplatConfig {
                opacity_weighted: seed % 2 == 0,
                ..SplatConfig::default()
            };
            let upstream = random_upstream(seed + 99, grid.voxel_count() * 4);
            let naive = splat_backward(&gaussians, &grid, &cfg, &upstream).unwrap();
            let blocked = splat_backward_blocked(&gaussians, &grid, &cfg, &upstream).unwrap();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 + 1e-6 * a.abs().max(b.abs());
            for g in 0..gaussians.len() {
                for k in 0..3 {
                    assert!(close(naive.position[g][k], blocked.position[g][k]));
                    assert!(close(naive.log_scale[g][k], blocked.log_scale[g][k]));
                }
                for k in 0..4 {
                    assert!(close(naive.rotation[g][k], blocked.rotation[g][k]));
                }
                assert!(close(naive.opacity_logit[g], blocked.opacity_logit[g]));
                for k in 0..3 {
                    assert!(close(
                        naive.class_logits[g * 3 + k],
                        blocked.class_logits[g * 3 + k]
                    ));
                }
            }
        }
    }

    #[test]
    fn blocked_backward_zero_upstream_is_zero() {
        let grid = test_grid([6, 6, 3], 2);
        let gaussians = random_gaussians(4, 10, &grid, 0.2..0.6);
        let upstream = vec![0.0; grid.voxel_count() * 3];
        let grads =
            splat_backward_blocked(&gaussians, &grid, &SplatConfig::default(), &upstream).unwrap();
        assert!(grads.position.iter().all(|p| p.norm() == 0.0));
        assert!(grads.class_logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_across_runs_and_thread_counts() {
        let grid = test_grid([12, 10, 6], 3);
        let gaussians = random_gaussians(7, 40, &grid, 0.2..0.8);
        let cfg = SplatConfig::default();
        let upstream = random_upstream(1234, grid.voxel_count() * 4);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let field = splat_forward_blocked(&gaussians, &grid, &cfg).unwrap();
                let grads = splat_backward_blocked(&gaussians, &grid, &cfg, &upstream).unwrap();
                (field.data, grads.position, grads.class_logits)
            })
        };
        let a = run(1);
        let b = run(1);
        assert_eq!(a, b);
        let c = run(4);
        assert_eq!(a, c);
    }

    #[test]
    fn work_conservation_pair_visits() {
        let grid = test_grid([10, 8, 6], 2);
        let gaussians = random_gaussians(3, 30, &grid, 0.2..0.8);
        let cfg = SplatConfig::default();
        let index = neighbor_pairs(&gaussians, &grid, cfg.cutoff_sigma).unwrap();
        let (_, fwd_stats) = splat_forward_blocked_with_stats(&gaussians, &grid, &cfg).unwrap();
        assert_eq!(fwd_stats.pair_visits, index.pair_count() as u64);
        let upstream = random_upstream(5, grid.voxel_count() * 3);
        let (_, bwd_stats) =
            splat_backward_blocked_with_stats(&gaussians, &grid, &cfg, &upstream).unwrap();
        assert_eq!(bwd_stats.pair_visits, index.pair_count() as u64);
    }

    #[test]
    fn engine_matches_free_functions() {
        let grid = test_grid([8, 8, 4], 2);
        let gaussians = random_gaussians(11, 15, &grid, 0.2..0.7);
        let cfg = SplatConfig::default();
        let engine = SplatEngine::new(&gaussians, &grid, &cfg).unwrap();
        let field = engine.field();
        let direct = splat_forward_blocked(&gaussians, &grid, &cfg).unwrap();
        assert_eq!(field.data, direct.data);
        let rows = engine.field_rows_f64();
        for (i, &f) in field.data.iter().enumerate() {
            assert!((f as f64 - rows[i]).abs() < 1e-7);
        }
        let upstream = random_upstream(42, grid.voxel_count() * 3);
        let a = engine.backward(&upstream).unwrap();
        let b = splat_backward_blocked(&gaussians, &grid, &cfg, &upstream).unwrap();
        assert_eq!(a.position, b.position);
        assert_eq!(a.class_logits, b.class_logits);
    }

    #[test]
    fn bench_rejects_insufficient_repetitions() {
        let spec = BenchSpec {
            gaussians: 10,
            grid_dims: [8, 8, 4],
            ..BenchSpec::default()
        };
        assert!(matches!(
            bench(&spec, 1, &SplatConfig::default()),
            Err(Error::InsufficientRepetitions(1))
        ));
    }

    #[test]
    fn bench_reports_consistent_speedups() {
        let spec = BenchSpec {
            gaussians: 40,
            grid_dims: [16, 16, 8],
            class_count: 3,
            seed: 2,
            scale_range: [0.2, 0.5],
        };
        let report = bench(&spec, 3, &SplatConfig::default()).unwrap();
        assert_eq!(report.voxels, 16 * 16 * 8);
        assert!(report.naive_fwd_ms > 0.0);
        assert!(report.blocked_bwd_ms > 0.0);
        assert!((report.speedup_fwd - report.naive_fwd_ms / report.blocked_fwd_ms).abs() < 1e-12);
        assert!((report.speedup_bwd - report.naive_bwd_ms / report.blocked_bwd_ms).abs() < 1e-12);
    }
}
