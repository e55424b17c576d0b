use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const GRAD_FLOOR: f64 = 1e-4;

/// Largest relative error between reverse-mode gradients and central
/// differences over every coordinate of every input.
///
/// The error of one coordinate is `|a - n| / max(|a|, |n|, GRAD_FLOOR)`,
/// so coordinates whose true gradient is zero are judged on absolute error
/// instead of amplifying difference noise.
/// `f` must build a scalar loss from the bound inputs.
pub fn finite_diff_check_many<F>(mut f: F, xs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    // analytic pass
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(&t.clone().with_grad())).collect();
        let loss = f(&mut g, &vars)?;
        if !g.item(loss).is_finite() {
            return Err(Error::NonFinite("finite-difference objective".into()));
        }
        let grads = g.backward(loss)?;
        vars.iter().map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default()).collect()
    };

    let mut worst = 0.0f64;
    let mut inputs: Vec<Tensor<f64>> = xs.to_vec();
    for t in 0..xs.len() {
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            inputs[t].data_mut()[i] = orig + h;
            let plus = eval(&mut f, &inputs)?;
            inputs[t].data_mut()[i] = orig - h;
            let minus = eval(&mut f, &inputs)?;
            inputs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[t].get(i).copied().unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn eval<F>(f: &mut F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t)).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.item(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite("finite-difference objective".into()));
    }
    Ok(v)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[8], &mut rng, 2.0);
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn constant_function() {
        let x = Tensor::<f64>::full([4], 1.5);
        let err = finite_diff_check(
            |g, _x| {
                let c = g.constant(&Tensor::scalar(3.0));
                Ok(g.sum(c))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<_> = (0..3).map(|_| random(&[4, 4], &mut rng, 1.0)).collect();
        let err = finite_diff_check_many(
            |g, v| {
                let ab = g.matmul(v[0], v[1])?;
                let abc = g.matmul(ab, v[2])?;
                let sq = g.mul(abc, abc)?;
                Ok(g.sum(sq))
            },
            &xs,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-3, "err {err}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::<f64>::full([1], 1.0);
        let r = finite_diff_check(
            |g, x| {
                let c = g.constant(&Tensor::full([1], f64::INFINITY));
                let y = g.mul(x, c)?;
                Ok(g.sum(y))
            },
            &x,
            1e-3,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
