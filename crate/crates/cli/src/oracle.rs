//! Exhaustive best-subset selection for least-squares regression.

use nalgebra::{DMatrix, DVector};
use tgate::{Dataset, Error, Result, Targets};

/// Best subset of a given size and its training mean-squared error.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetFit {
    pub features: Vec<usize>,
    pub mse: f64,
}

/// MSE of the least-squares fit of `y` on the chosen columns plus an intercept.
pub fn subset_mse(x: &DMatrix<f64>, y: &DVector<f64>, features: &[usize]) -> f64 {
    let n = x.nrows();
    let mut design = DMatrix::from_element(n, features.len() + 1, 1.0);
    for (c, &j) in features.iter().enumerate() {
        design.set_column(c + 1, &x.column(j));
    }
    let svd = design.clone().svd(true, true);
    let beta = svd.solve(y, 1e-12).expect("svd computed with u and v");
    let resid = y - design * beta;
    resid.norm_squared() / n as f64
}

fn to_matrices(data: &Dataset) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let [n, p] = data.inputs.shape() else {
        return Err(Error::Argument(format!("oracle needs [N, features] inputs, got {:?}", data.inputs.shape())));
    };
    let Targets::Values(y) = &data.targets else {
        return Err(Error::Argument("oracle needs regression targets".into()));
    };
    if y.shape() != [*n, 1] {
        return Err(Error::Argument(format!("oracle needs a single target column, got {:?}", y.shape())));
    }
    Ok((
        DMatrix::from_row_slice(*n, *p, data.inputs.data()),
        DVector::from_column_slice(y.data()),
    ))
}

pub const MAX_ORACLE_FEATURES: usize = 12;

/// Result of an exhaustive subset search.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Lowest-MSE subset among all subsets of size `<= budget`.
    pub best: SubsetFit,
    /// Lowest-MSE subset of each size `0..=budget`.
    pub per_size: Vec<SubsetFit>,
    /// Number of subsets solved.
    pub evaluated: usize,
}

/// Solves least squares on every feature subset of size `<= budget` and
/// returns the minimizer. Ties keep the smaller subset.
pub fn brute_force_select(data: &Dataset, budget: usize) -> Result<OracleResult> {
    let (x, y) = to_matrices(data)?;
    let p = x.ncols();
    if p > MAX_ORACLE_FEATURES {
        return Err(Error::Argument(format!(
            "brute force supports at most {MAX_ORACLE_FEATURES} features, got {p}"
        )));
    }
    let budget = budget.min(p);
    let mut per_size: Vec<Option<SubsetFit>> = vec![None; budget + 1];
    let mut best: Option<SubsetFit> = None;
    let mut evaluated = 0;
    for mask in 0u32..(1 << p) {
        if mask.count_ones() as usize > budget {
            continue;
        }
        let features: Vec<usize> = (0..p).filter(|j| mask & (1 << j) != 0).collect();
        let fit = SubsetFit { mse: subset_mse(&x, &y, &features), features };
        evaluated += 1;
        let mse = fit.mse;
        let slot = &mut per_size[fit.features.len()];
        if slot.as_ref().is_none_or(|b| fit.mse < b.mse) {
            *slot = Some(fit.clone());
        }
        let better = best.as_ref().is_none_or(|b| {
            fit.mse < b.mse || (fit.mse == b.mse && fit.features.len() < b.features.len())
        });
        if better {
            best = Some(fit);
        }
        assert!(best.as_ref().is_some_and(|b| b.mse <= mse), "oracle minimum exceeds an enumerated subset");
    }
    Ok(OracleResult {
        best: best.expect("the empty subset is always evaluated"),
        per_size: per_size.into_iter().map(|b| b.expect("every size visited")).collect(),
        evaluated,
    })
}

/// Training MSE of the least-squares fit on an arbitrary feature set.
pub fn fit_subset(data: &Dataset, features: &[usize]) -> Result<f64> {
    let (x, y) = to_matrices(data)?;
    if let Some(&bad) = features.iter().find(|&&j| j >= x.ncols()) {
        return Err(Error::Argument(format!("feature {bad} out of range")));
    }
    Ok(subset_mse(&x, &y, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tgate::Tensor;

    #[test]
    fn empty_subset_is_target_variance() {
        let x = Tensor::new(vec![4, 1], vec![0., 1., 2., 3.]).unwrap();
        let y = Tensor::new(vec![4, 1], vec![1., 3., 1., 3.]).unwrap();
        let d = Dataset::new(x, Targets::Values(y)).unwrap();
        let r = brute_force_select(&d, 0).unwrap();
        assert!(r.best.features.is_empty());
        assert!((r.best.mse - 1.0).abs() < 1e-12);
        assert_eq!(r.evaluated, 1);
        // Least squares on x: slope 0.4, residual variance 0.8.
        let r = brute_force_select(&d, 1).unwrap();
        assert!((r.per_size[1].mse - 0.8).abs() < 1e-12);
        assert_eq!(r.best.features, vec![0]);
    }

    #[test]
    fn recovers_exact_linear_subset() {
        let n = 30;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let r = [(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos(), (i as f64 * 0.31).sin() * 2.0];
            ys.push(2.0 * r[0] - r[2] + 0.5);
            xs.extend(r);
        }
        let d = Dataset::new(
            Tensor::new(vec![n, 3], xs).unwrap(),
            Targets::Values(Tensor::new(vec![n, 1], ys).unwrap()),
        )
        .unwrap();
        let r = brute_force_select(&d, 2).unwrap();
        assert_eq!(r.best.features, vec![0, 2]);
        assert!(r.best.mse < 1e-20);
        assert_eq!(r.evaluated, 7);
    }
}
