//! Flat-vector views over parameter structs, used by optimizers and
//! finite-difference checks.

/// Parameter containers whose trainable arrays can be walked in a fixed
/// order. Gradients are stored in the same type as the parameters.
pub trait ParamSet: Clone {
    fn arrays(&self) -> Vec<&[f64]>;
    fn arrays_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    fn flat_len(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.arrays().concat()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for a in self.arrays_mut() {
            let n = a.len();
            a.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// self += alpha * other
    fn add_scaled(&mut self, other: &Self, alpha: f64) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }

    fn norm_sq(&self) -> f64 {
        self.arrays()
            .iter()
            .flat_map(|a| a.iter())
            .map(|x| x * x)
            .sum()
    }

    fn is_finite(&self) -> bool {
        self.arrays()
            .iter()
            .all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// Implements [`ParamSet`] for a struct of contiguous ndarray fields.
#[macro_export]
macro_rules! impl_param_set {
    ($ty:ty; $($field:ident),+ $(,)?) => {
        impl $crate::params::ParamSet for $ty {
            fn arrays(&self) -> Vec<&[f64]> {
                vec![$(self.$field.as_slice().expect("contiguous")),+]
            }
            fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
                vec![$(self.$field.as_slice_mut().expect("contiguous")),+]
            }
        }
    };
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + step;
            let up = f(&work);
            work[i] = orig - step;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖ + ‖b‖, floor): the usual gradient-check metric.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(floor)
}
