//! Central finite differences against the f64 reference kernels.

use rand::seq::SliceRandom;
use rand::Rng;
use ranet::engine::{Padding, Tape, Var};

use super::{rng, tensor, to_f64, uniform};

pub const STEP: f64 = 1e-3;
pub const MAX_RELATIVE_ERROR: f64 = 1e-3;
/// Denominator floor for the relative error, so entries whose true gradient
/// is nearly zero are judged on absolute error instead.
pub const DENOMINATOR_FLOOR: f64 = 1e-2;
pub const FORWARD_TOLERANCE: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Check {
    /// Largest |kernel - reference| over the forward output.
    pub forward: f64,
    /// Largest relative gradient error over every checked input entry.
    pub gradient: f64,
}

impl Check {
    pub fn merge(self, other: Check) -> Check {
        Check {
            forward: self.forward.max(other.forward),
            gradient: self.gradient.max(other.gradient),
        }
    }

    pub fn passes(&self) -> bool {
        self.forward <= FORWARD_TOLERANCE && self.gradient <= MAX_RELATIVE_ERROR
    }
}

pub struct Input {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub differentiate: bool,
}

pub fn input(shape: &[usize], values: Vec<f64>) -> Input {
    Input {
        shape: shape.to_vec(),
        values,
        differentiate: true,
    }
}

pub fn fixed(shape: &[usize], values: Vec<f64>) -> Input {
    Input {
        differentiate: false,
        ..input(shape, values)
    }
}

/// Projects the kernel output onto random weights `r` so that every output
/// element contributes, then compares d(r . out)/d(input) with central
/// differences of the reference.
pub fn check(
    seed: u64,
    inputs: &[Input],
    taped: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> Check {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| {
            let t = tensor(&i.shape, &i.values);
            if i.differentiate {
                tape.leaf(t)
            } else {
                tape.constant(t)
            }
        })
        .collect();
    let out = taped(&mut tape, &vars);
    let out_value = tape.value(out).clone();
    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    let expected = reference(&base);
    let forward = super::max_abs_diff(out_value.data(), &expected);

    let r = uniform(&mut rng(seed ^ 0x5eed), out_value.numel(), -1.0, 1.0);
    let rv = tape.constant(tensor(out_value.shape(), &r));
    let projected = tape.mul(out, rv).unwrap();
    let loss = tape.sum(projected);
    let grads = tape.backward(loss).unwrap();

    let objective =
        |values: &[Vec<f64>]| -> f64 { reference(values).iter().zip(&r).map(|(a, b)| a * b).sum() };
    let mut gradient: f64 = 0.0;
    for (slot, inp) in inputs.iter().enumerate() {
        if !inp.differentiate {
            continue;
        }
        let analytic = to_f64(grads.get(vars[slot]).expect("leaf gradient").data());
        let mut probe = base.clone();
        for j in 0..inp.values.len() {
            probe[slot][j] = inp.values[j] + STEP;
            let plus = objective(&probe);
            probe[slot][j] = inp.values[j] - STEP;
            let minus = objective(&probe);
            probe[slot][j] = inp.values[j];
            let numeric = (plus - minus) / (2.0 * STEP);
            gradient = gradient.max(relative_error(analytic[j], numeric));
        }
    }
    Check { forward, gradient }
}

fn padding(same: bool) -> Padding {
    if same {
        Padding::Same
    } else {
        Padding::Valid
    }
}

pub fn conv2d(seed: u64) -> Check {
    let mut g = rng(seed);
    let (n, c, h, w) = (
        g.gen_range(1..=2),
        g.gen_range(1..=3),
        g.gen_range(3..=6),
        g.gen_range(3..=6),
    );
    let kout = g.gen_range(1..=3);
    let k = *[1, 3, 5]
        .iter()
        .filter(|&&k| k <= h.min(w))
        .collect::<Vec<_>>()
        .choose(&mut g)
        .unwrap();
    let k = *k;
    let stride = g.gen_range(1..=2);
    let same = g.gen_bool(0.5);
    let inputs = [
        input(&[n, c, h, w], uniform(&mut g, n * c * h * w, -1.0, 1.0)),
        input(
            &[kout, c, k, k],
            uniform(&mut g, kout * c * k * k, -1.0, 1.0),
        ),
        input(&[kout], uniform(&mut g, kout, -1.0, 1.0)),
    ];
    check(
        seed,
        &inputs,
        |t, v| t.conv2d(v[0], v[1], v[2], stride, padding(same)).unwrap(),
        |v| super::conv2d(&v[0], [n, c, h, w], &v[1], kout, k, &v[2], stride, same).0,
    )
}

/// Values spaced at least `0.03` apart so that a `1e-3` probe never
/// changes which element wins a window.
fn distinct_values(g: &mut impl Rng, len: usize) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..len).collect();
    ranks.shuffle(g);
    ranks
        .into_iter()
        .map(|r| -1.0 + 0.05 * r as f64 + g.gen_range(-0.01..0.01))
        .collect()
}

pub fn maxpool(seed: u64) -> Check {
    let mut g = rng(seed);
    let (n, c, h, w) = (
        g.gen_range(1..=2),
        g.gen_range(1..=3),
        g.gen_range(3..=6),
        g.gen_range(3..=6),
    );
    let k = g.gen_range(2..=3);
    let stride = g.gen_range(1..=2);
    let same = g.gen_bool(0.5);
    let inputs = [input(&[n, c, h, w], distinct_values(&mut g, n * c * h * w))];
    check(
        seed,
        &inputs,
        |t, v| t.maxpool2d(v[0], k, stride, padding(same)).unwrap(),
        |v| super::maxpool(&v[0], [n, c, h, w], k, stride, same).0,
    )
}

pub fn avgpool(seed: u64) -> Check {
    let mut g = rng(seed);
    let k = g.gen_range(1..=3);
    let (n, c) = (g.gen_range(1..=2), g.gen_range(1..=3));
    let (h, w) = (k * g.gen_range(1..=3), k * g.gen_range(1..=3));
    let inputs = [input(
        &[n, c, h, w],
        uniform(&mut g, n * c * h * w, -1.0, 1.0),
    )];
    check(
        seed,
        &inputs,
        |t, v| t.avgpool2d(v[0], k).unwrap(),
        |v| super::avgpool(&v[0], [n, c, h, w], k).0,
    )
}

pub fn batchnorm(seed: u64) -> Check {
    let mut g = rng(seed);
    let (n, c, h, w) = (
        g.gen_range(1..=2),
        g.gen_range(1..=3),
        g.gen_range(2..=4),
        g.gen_range(2..=4),
    );
    let inputs = [
        input(&[n, c, h, w], uniform(&mut g, n * c * h * w, -1.0, 1.0)),
        input(&[c], uniform(&mut g, c, 0.5, 1.5)),
        input(&[c], uniform(&mut g, c, -1.0, 1.0)),
    ];
    check(
        seed,
        &inputs,
        |t, v| t.batchnorm2d(v[0], v[1], v[2], None, 1e-5).unwrap().0,
        |v| super::batchnorm(&v[0], [n, c, h, w], &v[1], &v[2], 1e-5),
    )
}

fn small_shape(g: &mut impl Rng) -> Vec<usize> {
    vec![
        g.gen_range(1..=2),
        g.gen_range(1..=3),
        g.gen_range(1..=4),
        g.gen_range(1..=4),
    ]
}

pub fn relu(seed: u64) -> Check {
    let mut g = rng(seed);
    let shape = small_shape(&mut g);
    let len = shape.iter().product();
    // Keep clear of the kink at zero.
    let values = (0..len)
        .map(|_| {
            let m = g.gen_range(0.05..1.0);
            if g.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    check(
        seed,
        &[input(&shape, values)],
        |t, v| t.relu(v[0]),
        |v| super::relu(&v[0]),
    )
}

pub fn sigmoid(seed: u64) -> Check {
    let mut g = rng(seed);
    let shape = small_shape(&mut g);
    let values = uniform(&mut g, shape.iter().product(), -3.0, 3.0);
    check(
        seed,
        &[input(&shape, values)],
        |t, v| t.sigmoid(v[0]),
        |v| super::sigmoid(&v[0]),
    )
}

pub fn softmax(seed: u64) -> Check {
    let mut g = rng(seed);
    let (n, m) = (g.gen_range(1..=3), g.gen_range(2..=4));
    let values = uniform(&mut g, n * m, -2.0, 2.0);
    check(
        seed,
        &[input(&[n, m], values)],
        |t, v| t.softmax(v[0]).unwrap(),
        |v| super::softmax(&v[0], m),
    )
}

pub fn upsample(seed: u64) -> Check {
    let mut g = rng(seed);
    let shape = small_shape(&mut g);
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let values = uniform(&mut g, n * c * h * w, -1.0, 1.0);
    check(
        seed,
        &[input(&shape, values)],
        |t, v| t.upsample_bilinear2x(v[0]).unwrap(),
        |v| super::resize(&v[0], [n, c, h, w], 2 * h, 2 * w),
    )
}

/// Arbitrary target sizes, as used by the mask branch on odd spatial sizes.
pub fn resize(seed: u64) -> Check {
    let mut g = rng(seed);
    let shape = small_shape(&mut g);
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let (oh, ow) = (g.gen_range(1..=7), g.gen_range(1..=7));
    let values = uniform(&mut g, n * c * h * w, -1.0, 1.0);
    check(
        seed,
        &[input(&shape, values)],
        |t, v| t.resize_bilinear(v[0], oh, ow).unwrap(),
        |v| super::resize(&v[0], [n, c, h, w], oh, ow),
    )
}

pub fn dense(seed: u64) -> Check {
    let mut g = rng(seed);
    let (n, d, m) = (g.gen_range(1..=3), g.gen_range(1..=5), g.gen_range(1..=4));
    let inputs = [
        input(&[n, d], uniform(&mut g, n * d, -1.0, 1.0)),
        input(&[d, m], uniform(&mut g, d * m, -1.0, 1.0)),
        input(&[m], uniform(&mut g, m, -1.0, 1.0)),
    ];
    check(
        seed,
        &inputs,
        |t, v| t.dense(v[0], v[1], v[2]).unwrap(),
        |v| super::dense(&v[0], n, d, &v[1], m, &v[2]),
    )
}

pub fn add(seed: u64) -> Check {
    let mut g = rng(seed);
    let shape = small_shape(&mut g);
    let len = shape.iter().product();
    let inputs = [
        input(&shape, uniform(&mut g, len, -1.0, 1.0)),
        input(&shape, uniform(&mut g, len, -1.0, 1.0)),
    ];
    check(
        seed,
        &inputs,
        |t, v| t.add(v[0], v[1]).unwrap(),
        |v| v[0].iter().zip(&v[1]).map(|(a, b)| a + b).collect(),
    )
}

pub fn mul(seed: u64) -> Check {
    let mut g = rng(seed);
    let shape = small_shape(&mut g);
    let len = shape.iter().product();
    let inputs = [
        input(&shape, uniform(&mut g, len, -1.0, 1.0)),
        input(&shape, uniform(&mut g, len, -1.0, 1.0)),
    ];
    check(
        seed,
        &inputs,
        |t, v| t.mul(v[0], v[1]).unwrap(),
        |v| v[0].iter().zip(&v[1]).map(|(a, b)| a * b).collect(),
    )
}

pub fn bce(seed: u64) -> Check {
    let mut g = rng(seed);
    let n = g.gen_range(1..=4);
    let probs = uniform(&mut g, n * 2, 0.05, 0.95);
    let mut targets = vec![0.0; n * 2];
    for row in 0..n {
        targets[row * 2 + g.gen_range(0..2)] = 1.0;
    }
    let target_tensor = tensor(&[n, 2], &targets);
    check(
        seed,
        &[input(&[n, 2], probs), fixed(&[n, 2], targets)],
        move |t, v| t.bce_loss(v[0], &target_tensor).unwrap(),
        |v| vec![super::bce(&v[0], &v[1])],
    )
}

pub type Kernel = (&'static str, fn(u64) -> Check);

pub const KERNELS: [Kernel; 13] = [
    ("conv2d", conv2d),
    ("maxpool", maxpool),
    ("avgpool", avgpool),
    ("batchnorm", batchnorm),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("softmax", softmax),
    ("bilinear upsample", upsample),
    ("bilinear resize", resize),
    ("dense", dense),
    ("add", add),
    ("mul", mul),
    ("bce loss", bce),
];

/// Worst-case result per kernel over `instances` random cases.
pub fn run_suite(instances: u64) -> Vec<(&'static str, Check)> {
    KERNELS
        .iter()
        .map(|&(name, f)| {
            let worst = (0..instances).map(f).fold(Check::default(), Check::merge);
            (name, worst)
        })
        .collect()
}
