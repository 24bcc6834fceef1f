//! Derivative-free simplex minimization (Nelder–Mead).

use crate::float::Real;

#[derive(Debug, Clone)]
pub struct NelderMead<T> {
    /// Stop once the spread of objective values over the simplex is at most this.
    pub f_tol: T,
    /// ...and every vertex lies within this distance (per coordinate) of the best.
    pub x_tol: T,
    pub max_evals: usize,
    pub reflection: T,
    pub expansion: T,
    pub contraction: T,
    pub shrink: T,
}

impl<T: Real> Default for NelderMead<T> {
    fn default() -> Self {
        Self {
            f_tol: T::lit(1e-8),
            x_tol: T::lit(1e-7),
            max_evals: 20_000,
            reflection: T::one(),
            expansion: T::lit(2.0),
            contraction: T::lit(0.5),
            shrink: T::lit(0.5),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub evaluations: usize,
    pub converged: bool,
}

impl<T: Real> NelderMead<T> {
    /// Minimizes `f` from `x0`, building the initial simplex by stepping
    /// each coordinate by `steps[i]`. Non-finite objective values are
    /// treated as `+inf`.
    pub fn minimize<F>(&self, mut f: F, x0: &[T], steps: &[T]) -> Minimum<T>
    where
        F: FnMut(&[T]) -> T,
    {
        let n = x0.len();
        assert!(n >= 1, "at least one coordinate");
        assert_eq!(steps.len(), n, "one step per coordinate");
        let mut evals = 0usize;
        let mut eval = |x: &[T], evals: &mut usize| {
            *evals += 1;
            let v = f(x);
            if v.is_finite() {
                v
            } else {
                T::infinity()
            }
        };

        let mut simplex: Vec<Vec<T>> = Vec::with_capacity(n + 1);
        simplex.push(x0.to_vec());
        for i in 0..n {
            let mut v = x0.to_vec();
            v[i] += steps[i];
            simplex.push(v);
        }
        let mut values: Vec<T> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

        let mut order: Vec<usize> = (0..=n).collect();
        let mut centroid = vec![T::zero(); n];
        let mut trial = vec![T::zero(); n];
        let mut trial2 = vec![T::zero(); n];
        let mut converged = false;

        while evals < self.max_evals {
            order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
            let best = order[0];
            let worst = order[n];
            let second_worst = order[n - 1];

            if self.has_converged(&simplex, &values, best) {
                converged = true;
                break;
            }

            let nf = T::from_usize_lossy(n);
            for c in centroid.iter_mut() {
                *c = T::zero();
            }
            for &idx in &order[..n] {
                for (c, &v) in centroid.iter_mut().zip(&simplex[idx]) {
                    *c += v;
                }
            }
            for c in centroid.iter_mut() {
                *c /= nf;
            }

            // reflection
            for i in 0..n {
                trial[i] = centroid[i] + self.reflection * (centroid[i] - simplex[worst][i]);
            }
            let fr = eval(&trial, &mut evals);

            if fr < values[best] {
                for i in 0..n {
                    trial2[i] = centroid[i] + self.expansion * (trial[i] - centroid[i]);
                }
                let fe = eval(&trial2, &mut evals);
                if fe < fr {
                    simplex[worst].copy_from_slice(&trial2);
                    values[worst] = fe;
                } else {
                    simplex[worst].copy_from_slice(&trial);
                    values[worst] = fr;
                }
                continue;
            }
            if fr < values[second_worst] {
                simplex[worst].copy_from_slice(&trial);
                values[worst] = fr;
                continue;
            }

            // contraction, outside if the reflected point beats the worst
            let outside = fr < values[worst];
            for i in 0..n {
                trial2[i] = if outside {
                    centroid[i] + self.contraction * (trial[i] - centroid[i])
                } else {
                    centroid[i] + self.contraction * (simplex[worst][i] - centroid[i])
                };
            }
            let fc = eval(&trial2, &mut evals);
            let accept = if outside { fc <= fr } else { fc < values[worst] };
            if accept {
                simplex[worst].copy_from_slice(&trial2);
                values[worst] = fc;
                continue;
            }

            // shrink toward the best vertex
            let best_x = simplex[best].clone();
            for &idx in &order[1..] {
                for i in 0..n {
                    simplex[idx][i] = best_x[i] + self.shrink * (simplex[idx][i] - best_x[i]);
                }
                values[idx] = eval(&simplex[idx], &mut evals);
            }
        }

        let best = (0..=n)
            .min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal))
            .expect("nonempty simplex");
        Minimum {
            x: simplex[best].clone(),
            value: values[best],
            evaluations: evals,
            converged,
        }
    }

    fn has_converged(&self, simplex: &[Vec<T>], values: &[T], best: usize) -> bool {
        let fb = values[best];
        if !fb.is_finite() {
            return false;
        }
        let f_spread = values.iter().fold(T::zero(), |acc, &v| acc.max(v - fb));
        // floating-point floor so f32 objectives can terminate
        let f_floor = T::epsilon() * T::lit(16.0) * fb.abs();
        if f_spread > self.f_tol.max(f_floor) {
            return false;
        }
        let xb = &simplex[best];
        simplex.iter().all(|v| {
            v.iter()
                .zip(xb)
                .all(|(&a, &b)| (a - b).abs() <= self.x_tol.max(T::epsilon() * T::lit(16.0) * b.abs()))
        })
    }
}
