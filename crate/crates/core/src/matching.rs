//! Instance matching layer: bidirectional alignment at instance, class and
//! episode granularity, fusion, and pooled comparison.
//!
//! Alignment of a support instance against its class context and against
//! the episode context does not depend on the query, so [`SupportContext`]
//! computes those views once per episode. The query's class-level view is
//! computed once per class and its episode-level view once per query.

use rand::Rng;

use crate::encoder::EncodedSeq;
use crate::error::{Error, Result};
use crate::params::{Activation, Bound, Linear, ParamSet};
use crate::tape::{self, Var};
use crate::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_instance: bool,
    pub use_class: bool,
    pub use_episode: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl AblationFlags {
    pub const fn all() -> Self {
        Self {
            use_instance: true,
            use_class: true,
            use_episode: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            use_instance: false,
            use_class: false,
            use_episode: false,
        }
    }

    pub fn levels(&self) -> [bool; 3] {
        [self.use_instance, self.use_class, self.use_episode]
    }

    pub fn enabled_count(&self) -> usize {
        self.levels().iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.enabled_count() > 0
    }
}

const LEVEL_NAMES: [&str; 3] = ["H1", "H2", "H3"];

/// Adds the matching-layer parameters for width `d`. Disabled levels get no
/// fusion layer, and the output fusion layer only sees enabled levels.
pub fn init_params<R: Rng + ?Sized>(
    params: &mut ParamSet,
    d: usize,
    flags: AblationFlags,
    rng: &mut R,
) -> Result<()> {
    if flags.any() {
        params.add_linear("match.F", d, d, rng)?;
        for (name, on) in LEVEL_NAMES.iter().zip(flags.levels()) {
            if on {
                params.add_linear(&format!("match.{name}"), 4 * d, d, rng)?;
            }
        }
        params.add_linear("match.H", flags.enabled_count() * d, d, rng)?;
    }
    params.add_linear("match.G", 8 * d, d, rng)
}

/// Matching-layer parameters bound onto a tape.
#[derive(Clone, Copy, Debug)]
pub struct MatchingParams<'t> {
    pub flags: AblationFlags,
    pub f: Option<Linear<'t>>,
    pub levels: [Option<Linear<'t>>; 3],
    pub h: Option<Linear<'t>>,
    pub g: Linear<'t>,
}

impl<'t> MatchingParams<'t> {
    pub fn from_bound(bound: &Bound<'t>, flags: AblationFlags) -> Result<Self> {
        let mut levels = [None; 3];
        let (mut f, mut h) = (None, None);
        if flags.any() {
            f = Some(bound.linear("match.F")?);
            h = Some(bound.linear("match.H")?);
            for (i, on) in flags.levels().into_iter().enumerate() {
                if on {
                    levels[i] = Some(bound.linear(&format!("match.{}", LEVEL_NAMES[i]))?);
                }
            }
        }
        Ok(Self {
            flags,
            f,
            levels,
            h,
            g: bound.linear("match.G")?,
        })
    }
}

/// A sequence together with its alignment projection `F(x)`.
#[derive(Clone, Copy, Debug)]
pub struct Projected<'t> {
    pub hidden: Var<'t>,
    pub proj: Var<'t>,
}

/// Applies the shared alignment projection; `None` means identity.
pub fn project<'t>(x: Var<'t>, f: Option<&Linear<'t>>, mode: &mut Mode<'_>) -> Result<Projected<'t>> {
    let proj = match f {
        Some(f) => f.forward(mode.dropout(x)?, Activation::Relu)?,
        None => x,
    };
    Ok(Projected { hidden: x, proj })
}

/// Result of aligning `a` against `b`: `a_hat[i] = Σ_j w[i,j]·b[j]`.
#[derive(Clone, Copy, Debug)]
pub struct OneWay<'t> {
    pub aligned: Var<'t>,
    pub weights: Var<'t>,
}

/// Aligns every row of `a` to the rows of `b` with softmax-normalised
/// energies `F(a_i)·F(b_j)`.
pub fn align_one_way<'t>(a: &Projected<'t>, b: &Projected<'t>) -> Result<OneWay<'t>> {
    let weights = a.proj.matmul_bt(b.proj)?.softmax_rows()?;
    Ok(OneWay {
        aligned: weights.matmul(b.hidden)?,
        weights,
    })
}

/// Both directions of the alignment between `a` and `b`.
pub fn bi_align_projected<'t>(a: &Projected<'t>, b: &Projected<'t>) -> Result<(OneWay<'t>, OneWay<'t>)> {
    Ok((align_one_way(a, b)?, align_one_way(b, a)?))
}

/// `(â, b̂)` for token matrices `a` (`l_a×D`) and `b` (`l_b×D`).
pub fn bi_align<'t>(
    a: Var<'t>,
    b: Var<'t>,
    f: Option<&Linear<'t>>,
    mode: &mut Mode<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "bi_align width mismatch: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let pa = project(a, f, mode)?;
    let pb = project(b, f, mode)?;
    let (ab, ba) = bi_align_projected(&pa, &pb)?;
    Ok((ab.aligned, ba.aligned))
}

/// The six aligned views of one query/support pair. Disabled levels are `None`.
#[derive(Clone, Copy, Debug, Default)]
pub struct AlignedViews<'t> {
    pub q_inst: Option<Var<'t>>,
    pub q_class: Option<Var<'t>>,
    pub q_epi: Option<Var<'t>>,
    pub s_inst: Option<Var<'t>>,
    pub s_class: Option<Var<'t>>,
    pub s_epi: Option<Var<'t>>,
}

impl<'t> AlignedViews<'t> {
    fn query_side(&self) -> [Option<Var<'t>>; 3] {
        [self.q_inst, self.q_class, self.q_epi]
    }

    fn support_side(&self) -> [Option<Var<'t>>; 3] {
        [self.s_inst, self.s_class, self.s_epi]
    }
}

/// Row-concatenation of member sequences with their boundaries.
#[derive(Clone, Debug)]
pub struct ContextSeq<'t> {
    pub seq: Projected<'t>,
    /// End offset of each member; strictly increasing, last equals the length.
    pub boundaries: Vec<usize>,
}

impl<'t> ContextSeq<'t> {
    fn concat(members: &[Projected<'t>]) -> Result<Self> {
        let hidden: Vec<_> = members.iter().map(|m| m.hidden).collect();
        let proj: Vec<_> = members.iter().map(|m| m.proj).collect();
        let mut end = 0;
        let boundaries = members
            .iter()
            .map(|m| {
                end += m.hidden.rows();
                end
            })
            .collect();
        Ok(Self {
            seq: Projected {
                hidden: tape::concat_rows(&hidden)?,
                proj: tape::concat_rows(&proj)?,
            },
            boundaries,
        })
    }

    pub fn len(&self) -> usize {
        *self.boundaries.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every row-stochastic weight matrix produced by an alignment call, for
/// inspection.
#[derive(Default)]
pub struct WeightLog<'t> {
    pub weights: Vec<Var<'t>>,
}

/// Query-independent part of one episode: projected supports, contexts,
/// the class/episode views of every support, and their fused levels.
pub struct SupportContext<'t> {
    pub params: MatchingParams<'t>,
    pub supports: Vec<Vec<Projected<'t>>>,
    pub class_ctx: Vec<ContextSeq<'t>>,
    pub episode_ctx: Option<ContextSeq<'t>>,
    s_class: Vec<Vec<Option<Var<'t>>>>,
    s_epi: Vec<Vec<Option<Var<'t>>>>,
    s_fused: Vec<Vec<[Option<Var<'t>>; 3]>>,
    pub weight_log: WeightLog<'t>,
}

fn fuse_level<'t>(orig: Var<'t>, aligned: Var<'t>, h: &Linear<'t>, mode: &mut Mode<'_>) -> Result<Var<'t>> {
    let diff = orig.sub(aligned)?.abs();
    let prod = orig.mul(aligned)?;
    let input = tape::concat_cols(&[orig, aligned, diff, prod])?;
    h.forward(mode.dropout(input)?, Activation::Relu)
}

impl<'t> SupportContext<'t> {
    pub fn build(
        supports: &[Vec<EncodedSeq<'t>>],
        params: MatchingParams<'t>,
        mode: &mut Mode<'_>,
    ) -> Result<Self> {
        if supports.is_empty() || supports.iter().any(Vec::is_empty) {
            return Err(Error::Data("support set must hold at least one instance per class".into()));
        }
        let flags = params.flags;
        let mut projected = Vec::with_capacity(supports.len());
        for class in supports {
            let mut row = Vec::with_capacity(class.len());
            for s in class {
                row.push(if flags.any() {
                    project(s.hidden, params.f.as_ref(), mode)?
                } else {
                    Projected {
                        hidden: s.hidden,
                        proj: s.hidden,
                    }
                });
            }
            projected.push(row);
        }

        let mut class_ctx = Vec::new();
        if flags.use_class || flags.use_episode {
            for row in &projected {
                class_ctx.push(ContextSeq::concat(row)?);
            }
        }
        let episode_ctx = if flags.use_episode {
            let members: Vec<Projected<'t>> = class_ctx.iter().map(|c| c.seq).collect();
            let mut ctx = ContextSeq::concat(&members)?;
            ctx.boundaries = projected.iter().flatten().scan(0, |end, p| {
                *end += p.hidden.rows();
                Some(*end)
            }).collect();
            Some(ctx)
        } else {
            None
        };

        let mut weight_log = WeightLog::default();
        let mut s_class = Vec::with_capacity(projected.len());
        let mut s_epi = Vec::with_capacity(projected.len());
        let mut s_fused = Vec::with_capacity(projected.len());
        for (n, row) in projected.iter().enumerate() {
            let (mut cls_row, mut epi_row, mut fused_row) = (Vec::new(), Vec::new(), Vec::new());
            for s in row {
                let mut fused = [None; 3];
                let sc = if flags.use_class {
                    let al = align_one_way(s, &class_ctx[n].seq)?;
                    weight_log.weights.push(al.weights);
                    let h2 = params.levels[1].as_ref().expect("H2 bound");
                    fused[1] = Some(fuse_level(s.hidden, al.aligned, h2, mode)?);
                    Some(al.aligned)
                } else {
                    None
                };
                let se = if let Some(ep) = &episode_ctx {
                    let al = align_one_way(s, &ep.seq)?;
                    weight_log.weights.push(al.weights);
                    let h3 = params.levels[2].as_ref().expect("H3 bound");
                    fused[2] = Some(fuse_level(s.hidden, al.aligned, h3, mode)?);
                    Some(al.aligned)
                } else {
                    None
                };
                cls_row.push(sc);
                epi_row.push(se);
                fused_row.push(fused);
            }
            s_class.push(cls_row);
            s_epi.push(epi_row);
            s_fused.push(fused_row);
        }

        Ok(Self {
            params,
            supports: projected,
            class_ctx,
            episode_ctx,
            s_class,
            s_epi,
            s_fused,
            weight_log,
        })
    }

    pub fn ways(&self) -> usize {
        self.supports.len()
    }

    /// All aligned views for one query, indexed `[n][k]`.
    pub fn align_query(&mut self, q: EncodedSeq<'t>, mode: &mut Mode<'_>) -> Result<Vec<Vec<AlignedViews<'t>>>> {
        Ok(self.align_query_inner(q, mode)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn align_query_inner(
        &mut self,
        q: EncodedSeq<'t>,
        mode: &mut Mode<'_>,
    ) -> Result<(Vec<Vec<AlignedViews<'t>>>, Projected<'t>)> {
        let flags = self.params.flags;
        let qp = if flags.any() {
            project(q.hidden, self.params.f.as_ref(), mode)?
        } else {
            Projected {
                hidden: q.hidden,
                proj: q.hidden,
            }
        };
        let q_epi = match &self.episode_ctx {
            Some(ep) => {
                let al = align_one_way(&qp, &ep.seq)?;
                self.weight_log.weights.push(al.weights);
                Some(al.aligned)
            }
            None => None,
        };
        let mut out = Vec::with_capacity(self.ways());
        for n in 0..self.ways() {
            let q_class = if flags.use_class {
                let al = align_one_way(&qp, &self.class_ctx[n].seq)?;
                self.weight_log.weights.push(al.weights);
                Some(al.aligned)
            } else {
                None
            };
            let mut row = Vec::with_capacity(self.supports[n].len());
            for k in 0..self.supports[n].len() {
                let (q_inst, s_inst) = if flags.use_instance {
                    let (qs, sq) = bi_align_projected(&qp, &self.supports[n][k])?;
                    self.weight_log.weights.push(qs.weights);
                    self.weight_log.weights.push(sq.weights);
                    (Some(qs.aligned), Some(sq.aligned))
                } else {
                    (None, None)
                };
                row.push(AlignedViews {
                    q_inst,
                    q_class,
                    q_epi,
                    s_inst,
                    s_class: self.s_class[n][k],
                    s_epi: self.s_epi[n][k],
                });
            }
            out.push(row);
        }
        Ok((out, qp))
    }

    /// Instance-wise matching vectors `[n][k]` (each `1×D`) for one query.
    pub fn match_query(&mut self, q: EncodedSeq<'t>, mode: &mut Mode<'_>) -> Result<Vec<Vec<Var<'t>>>> {
        let (views, qp) = self.align_query_inner(q, mode)?;
        let p = self.params;
        // query-side fused levels that are shared across k (class) or n (episode)
        let q_epi_fused = match views.first().and_then(|r| r.first()).and_then(|v| v.q_epi) {
            Some(a) => Some(fuse_level(qp.hidden, a, p.levels[2].as_ref().expect("H3"), mode)?),
            None => None,
        };
        let mut out = Vec::with_capacity(views.len());
        for (n, row) in views.iter().enumerate() {
            let q_class_fused = match row.first().and_then(|v| v.q_class) {
                Some(a) => Some(fuse_level(qp.hidden, a, p.levels[1].as_ref().expect("H2"), mode)?),
                None => None,
            };
            let mut m_row = Vec::with_capacity(row.len());
            for (k, v) in row.iter().enumerate() {
                let s = self.supports[n][k].hidden;
                let (q_fused, s_fused) = if p.flags.any() {
                    let mut q_levels = [None, q_class_fused, q_epi_fused];
                    let mut s_levels = self.s_fused[n][k];
                    if let (Some(qa), Some(sa)) = (v.q_inst, v.s_inst) {
                        let h1 = p.levels[0].as_ref().expect("H1");
                        q_levels[0] = Some(fuse_level(qp.hidden, qa, h1, mode)?);
                        s_levels[0] = Some(fuse_level(s, sa, h1, mode)?);
                    }
                    let h = p.h.as_ref().expect("H bound");
                    (
                        fuse_output(&q_levels, h, mode)?,
                        fuse_output(&s_levels, h, mode)?,
                    )
                } else {
                    (qp.hidden, s)
                };
                m_row.push(instance_match(q_fused, s_fused, &p.g, mode)?);
            }
            out.push(m_row);
        }
        Ok(out)
    }
}

fn fuse_output<'t>(levels: &[Option<Var<'t>>; 3], h: &Linear<'t>, mode: &mut Mode<'_>) -> Result<Var<'t>> {
    let parts: Vec<Var<'t>> = levels.iter().flatten().copied().collect();
    let input = tape::concat_cols(&parts)?;
    h.forward(mode.dropout(input)?, Activation::Relu)
}

/// Per-(n, k) aligned views of `q` against every support instance.
pub fn multi_grained_align<'t>(
    q: EncodedSeq<'t>,
    supports: &[Vec<EncodedSeq<'t>>],
    params: MatchingParams<'t>,
    mode: &mut Mode<'_>,
) -> Result<Vec<Vec<AlignedViews<'t>>>> {
    let mut ctx = SupportContext::build(supports, params, mode)?;
    ctx.align_query(q, mode)
}

/// Fuses original and aligned representations on both sides. With every
/// level disabled the originals pass through unchanged.
pub fn fuse<'t>(
    q: EncodedSeq<'t>,
    s: EncodedSeq<'t>,
    views: &AlignedViews<'t>,
    params: &MatchingParams<'t>,
    mode: &mut Mode<'_>,
) -> Result<(Var<'t>, Var<'t>)> {
    if !params.flags.any() {
        return Ok((q.hidden, s.hidden));
    }
    let mut sides = [(q.hidden, views.query_side()), (s.hidden, views.support_side())]
        .into_iter()
        .map(|(orig, aligned)| {
            let mut levels = [None; 3];
            for i in 0..3 {
                match (params.levels[i].as_ref(), aligned[i]) {
                    (Some(h), Some(a)) => levels[i] = Some(fuse_level(orig, a, h, mode)?),
                    (None, None) => {}
                    _ => return Err(Error::State(format!("aligned views disagree with flags at level {}", i + 1))),
                }
            }
            fuse_output(&levels, params.h.as_ref().expect("H bound"), mode)
        });
    let qf = sides.next().expect("query side")?;
    let sf = sides.next().expect("support side")?;
    Ok((qf, sf))
}

/// `G([q̄; s̄; |q̄ − s̄|; q̄ ⊙ s̄])` with `x̄ = [max(x); mean(x)]` over tokens.
pub fn instance_match<'t>(q_fused: Var<'t>, s_fused: Var<'t>, g: &Linear<'t>, mode: &mut Mode<'_>) -> Result<Var<'t>> {
    if q_fused.cols() != s_fused.cols() {
        return Err(Error::shape(format!(
            "instance_match width mismatch: {} vs {}",
            q_fused.cols(),
            s_fused.cols()
        )));
    }
    let qv = q_fused.pool_max_avg()?;
    let sv = s_fused.pool_max_avg()?;
    let input = tape::concat_cols(&[qv, sv, qv.sub(sv)?.abs(), qv.mul(sv)?])?;
    g.forward(mode.dropout(input)?, Activation::Relu)
}
