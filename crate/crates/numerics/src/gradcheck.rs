use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::{Gradients, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Denominator floor of the relative error. Central differences of an O(1)
/// loss carry roundoff near `2e-16 / eps`, about 2e-11 at `eps = 1e-5`, so a
/// gradient below this floor is checked to an absolute `tol * GRAD_FLOOR`.
pub const GRAD_FLOOR: f64 = 1e-6;

fn eval_loss<T: Scalar, F, E>(store: &ParamStore<T>, f: &mut F) -> std::result::Result<f64, E>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> std::result::Result<Var, E>,
{
    let mut g = Graph::inference();
    let loss = f(store, &mut g)?;
    Ok(g.value(loss).data()[0].as_f64())
}

/// Compares analytic gradients of `f` against central differences on
/// `samples` randomly chosen trainable coordinates.
///
/// The relative error per coordinate is `|a - b| / max(|a|, |b|, GRAD_FLOOR)`.
pub fn finite_diff_check<T: Scalar, F, E>(
    store: &mut ParamStore<T>,
    mut f: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> std::result::Result<GradCheckReport, E>
where
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> std::result::Result<Var, E>,
    E: From<crate::NumericsError>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    g.backward(loss)?;
    let mut grads = Gradients::for_store(store);
    g.accumulate_param_grads(&mut grads, T::one());
    drop(g);

    let coords: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.tensor.numel()).map(move |i| (id, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, coords.len(), samples.min(coords.len()));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for pick in picks.iter() {
        let (id, i) = coords[pick];
        let orig = store.tensor(id).data()[i];
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[i].as_f64());
        store.get_mut(id).tensor.data_mut()[i] = orig + T::from_f64_lossy(eps);
        let plus = eval_loss(store, &mut f)?;
        store.get_mut(id).tensor.data_mut()[i] = orig - T::from_f64_lossy(eps);
        let minus = eval_loss(store, &mut f)?;
        store.get_mut(id).tensor.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((store.get(id).name.clone(), i, analytic, numeric));
            }
        }
    }
    Ok(report)
}

/// Builds a store from named random inputs and checks `op` reduced through a
/// fixed random projection, so every output coordinate matters.
pub fn check_op<F>(
    inputs: &[(&str, &[usize])],
    seed: u64,
    eps: f64,
    samples: usize,
    op: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .map(|(name, shape)| store.add(*name, Tensor::randn(shape, 1.0, &mut rng)))
        .collect();
    let out_shape = {
        let mut g = Graph::<f64>::inference();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let y = op(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let proj = Tensor::<f64>::randn(&out_shape, 1.0, &mut rng);
    finite_diff_check(
        &mut store,
        |s, g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = op(g, &vars)?;
            let r = g.constant(proj.clone());
            let p = g.mul(y, r)?;
            Ok(g.sum_all(p))
        },
        eps,
        samples,
        seed ^ 0x5eed,
    )
}

/// Step used by [`primitive_suite`].
pub const SUITE_EPS: f64 = 1e-3;
/// Coordinates sampled per primitive by [`primitive_suite`].
pub const SUITE_SAMPLES: usize = 50;

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
/// A named primitive case: input names and shapes, and the op under test.
type Case = (&'static str, Vec<(&'static str, &'static [usize])>, OpFn);

/// One finite-difference report per differentiable primitive, in `f64`.
pub fn primitive_suite() -> Result<Vec<(&'static str, GradCheckReport)>> {
    fn sq_plus<const N: usize>(
        g: &mut Graph<f64>,
        a: Var,
        shape: [usize; N],
        c: f64,
    ) -> Result<Var> {
        let sq = g.mul(a, a)?;
        let c = g.constant(Tensor::full(&shape, c));
        g.add(sq, c)
    }
    let cases: Vec<Case> = vec![
        (
            "matmul",
            vec![("a", &[3, 4]), ("b", &[4, 5])],
            Box::new(|g, v| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_nt",
            vec![("a", &[3, 4]), ("b", &[5, 4])],
            Box::new(|g, v| g.matmul_nt(v[0], v[1])),
        ),
        (
            "linear",
            vec![("x", &[6, 4]), ("w", &[3, 4]), ("b", &[3])],
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "add",
            vec![("a", &[2, 3]), ("b", &[2, 3])],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![("a", &[2, 3]), ("b", &[2, 3])],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![("a", &[2, 3]), ("b", &[2, 3])],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        (
            "add_row",
            vec![("a", &[4, 3]), ("r", &[3])],
            Box::new(|g, v| g.add_row(v[0], v[1])),
        ),
        (
            "scale",
            vec![("a", &[2, 3])],
            Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
        ),
        (
            "embedding_add",
            vec![("a", &[4, 5]), ("e", &[4, 5])],
            Box::new(|g, v| g.embedding_add(v[0], v[1])),
        ),
        (
            "gelu",
            vec![("a", &[3, 7])],
            Box::new(|g, v| Ok(g.gelu(v[0]))),
        ),
        // Shifted away from the kink so central differences stay on one side.
        (
            "relu",
            vec![("a", &[3, 7])],
            Box::new(|g, v| {
                let p = sq_plus(g, v[0], [3, 7], 0.05)?;
                Ok(g.relu(p))
            }),
        ),
        (
            "sqrt",
            vec![("a", &[5])],
            Box::new(|g, v| {
                let p = sq_plus(g, v[0], [5], 0.5)?;
                Ok(g.sqrt(p))
            }),
        ),
        (
            "softmax_axis0",
            vec![("a", &[2, 3, 4])],
            Box::new(|g, v| g.softmax(v[0], 0)),
        ),
        (
            "softmax_axis1",
            vec![("a", &[2, 3, 4])],
            Box::new(|g, v| g.softmax(v[0], 1)),
        ),
        (
            "softmax_axis2",
            vec![("a", &[2, 3, 4])],
            Box::new(|g, v| g.softmax(v[0], 2)),
        ),
        (
            "layer_norm",
            vec![("x", &[5, 6]), ("g", &[6]), ("b", &[6])],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "sum",
            vec![("a", &[2, 3, 4])],
            Box::new(|g, v| g.sum(v[0], 1)),
        ),
        (
            "mean",
            vec![("a", &[2, 3, 4])],
            Box::new(|g, v| g.mean(v[0], 2)),
        ),
        (
            "sum_all",
            vec![("a", &[2, 3, 4])],
            Box::new(|g, v| Ok(g.sum_all(v[0]))),
        ),
        (
            "mean_all",
            vec![("a", &[2, 3, 4])],
            Box::new(|g, v| Ok(g.mean_all(v[0]))),
        ),
        (
            "concat_mid",
            vec![("a", &[2, 3, 2]), ("b", &[2, 1, 2])],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        (
            "concat_last",
            vec![("a", &[4, 3]), ("b", &[4, 2])],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        (
            "transpose",
            vec![("a", &[3, 5])],
            Box::new(|g, v| g.transpose(v[0])),
        ),
        (
            "slice_cols",
            vec![("a", &[3, 5])],
            Box::new(|g, v| g.slice_cols(v[0], 1, 3)),
        ),
        (
            "gather_rows",
            vec![("a", &[4, 3])],
            Box::new(|g, v| g.gather_rows(v[0], &[3, 0, 3])),
        ),
        (
            "reshape",
            vec![("a", &[2, 6])],
            Box::new(|g, v| g.reshape(v[0], &[3, 4])),
        ),
        (
            "upsample2x",
            vec![("a", &[3, 2, 4])],
            Box::new(|g, v| g.upsample2x(v[0])),
        ),
        (
            "avg_pool2x",
            vec![("a", &[4, 6, 3])],
            Box::new(|g, v| g.avg_pool2x(v[0])),
        ),
        (
            "conv2d_3x3_bias",
            vec![("x", &[5, 6, 3]), ("w", &[4, 3, 3, 3]), ("b", &[4])],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)),
        ),
        (
            "conv2d_patchify",
            vec![("x", &[8, 8, 2]), ("w", &[3, 4, 4, 2])],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, 4, 0)),
        ),
        (
            "conv2d_strided",
            vec![("x", &[7, 5, 2]), ("w", &[3, 3, 3, 2])],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, 2, 1)),
        ),
        (
            "conv2d_1x1",
            vec![("x", &[3, 3, 4]), ("w", &[5, 1, 1, 4])],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, 1, 0)),
        ),
        (
            "nll_clamped",
            vec![("a", &[6, 3])],
            Box::new(|g, v| {
                let p = g.softmax(v[0], 1)?;
                g.nll_clamped(p, &[0, 2, 255, 1, 1, 255])
            }),
        ),
        (
            "class_means",
            vec![("f", &[7, 4])],
            Box::new(|g, v| Ok(g.class_means(v[0], &[1, 1, 0, 255, 2, 0, 1], 4)?.0)),
        ),
        (
            "frobenius",
            vec![("a", &[3, 4]), ("b", &[3, 4])],
            Box::new(|g, v| {
                let d = g.sub(v[0], v[1])?;
                Ok(g.frobenius(d))
            }),
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, op))| {
            Ok((
                name,
                check_op(&inputs, i as u64 + 1, SUITE_EPS, SUITE_SAMPLES, op)?,
            ))
        })
        .collect()
}
