use anyhow::{bail, Result};
use ghl::arch::ArchSpec;
use ghl::autodiff::{
    backward_pass, compare_gradients, finite_difference_gradient, forward_pass, softmax_cross_entropy, LayerCheck,
    Network, RELATIVE_ERROR_FLOOR,
};
use ghl::rng::SeededRng;
use ghl::trainer::init_network;
use ghl::Tensor;

/// Finite differences cost two forward passes per parameter.
pub const MAX_PARAMETERS: usize = 10_000;
pub const TOLERANCE: f64 = 1e-5;

pub struct GradcheckArgs {
    pub arch: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    pub batch: usize,
    pub eps: f64,
    pub zero_weights: bool,
    /// Test hook: multiply the first layer's analytic gradient by this factor.
    pub corrupt_backward: Option<f64>,
}

pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow::anyhow!("bad shape `{s}` (expected e.g. 16 or 3x8x8)"))?;
    if dims.is_empty() || dims.contains(&0) {
        bail!("bad shape `{s}`: every extent must be positive");
    }
    Ok(dims)
}

/// Per-layer results, or an error for oversized or malformed architectures.
pub fn run(args: &GradcheckArgs) -> Result<Vec<LayerCheck>> {
    let spec = ArchSpec::Named(args.arch.clone()).resolve(&args.input_shape, args.classes)?;
    let params = spec.parameter_count();
    if params > MAX_PARAMETERS {
        bail!(
            "architecture `{}` has {params} parameters; the finite-difference check is limited to {MAX_PARAMETERS}",
            args.arch
        );
    }
    let net = if args.zero_weights {
        Network::zeros(spec.clone())?
    } else {
        init_network(&spec, args.seed)?
    };

    let mut rng = SeededRng::derived(args.seed, 0x6772_6164);
    let per_sample: usize = args.input_shape.iter().product();
    let mut data = Vec::with_capacity(args.batch * per_sample);
    for n in 0..args.batch {
        if args.zero_weights && n % 2 == 1 {
            // mirror the previous sample so the batch is symmetric about 0
            let start = data.len() - per_sample;
            let prev: Vec<f64> = data[start..].iter().map(|v: &f64| -v).collect();
            data.extend(prev);
        } else {
            data.extend((0..per_sample).map(|_| rng.normal()));
        }
    }
    let mut shape = vec![args.batch];
    shape.extend(&args.input_shape);
    let x = Tensor::new(shape, data)?;
    let labels: Vec<usize> = (0..args.batch).map(|_| rng.below(args.classes)).collect();

    let out = forward_pass(&net, &x, None)?;
    let (_, logit_grad) = softmax_cross_entropy(&out.logits, &labels)?;
    let mut analytic = backward_pass(&net, &out.caches, &logit_grad)?;
    if let Some(factor) = args.corrupt_backward {
        if let Some(g) = analytic.grads.values_mut().next() {
            *g = g.scale(factor);
        }
    }
    let numeric = finite_difference_gradient(&net, &x, &labels, args.eps)?;
    Ok(compare_gradients(&net, &analytic, &numeric)?)
}

pub fn report(checks: &[LayerCheck]) -> bool {
    let mut ok = true;
    for c in checks {
        let pass = c.max_relative_error < TOLERANCE;
        ok &= pass;
        println!(
            "layer {} ({}): max relative error {:.3e}, max abs error {:.3e}  {}",
            c.layer_id,
            c.kind,
            c.max_relative_error,
            c.max_abs_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{}: tolerance {TOLERANCE:e}, relative error floor {RELATIVE_ERROR_FLOOR:e}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}
