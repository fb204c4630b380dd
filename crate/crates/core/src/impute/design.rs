use nalgebra::DMatrix;

use crate::data::TrialDataset;
use crate::error::{Error, Result};

pub const INTERCEPT: &str = "(intercept)";
pub const CLUSTER_SIZE_COLUMN: &str = "n_i";

/// Predictors and responses for one arm.
///
/// `x` has an intercept column followed by the auxiliaries (and cluster
/// size when requested), on their original scale. Responses are
/// `(log cost, QALY)` with `None` for missing cells.
#[derive(Debug, Clone)]
pub struct Design {
    pub columns: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<[Option<f64>; 2]>,
    /// Cluster index of each row, into `cluster_ids`.
    pub cluster: Vec<usize>,
    pub cluster_ids: Vec<String>,
}

impl Design {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_predictors(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_ids.len()
    }

    pub fn n_missing(&self) -> usize {
        self.y.iter().flatten().filter(|v| v.is_none()).count()
    }
}

pub fn build_design(d: &TrialDataset, auxiliaries: &[String], cluster_size: bool) -> Result<Design> {
    let mut columns = vec![INTERCEPT.to_string()];
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; d.len()]];
    for name in auxiliaries {
        let v = d
            .covariate(name)
            .ok_or_else(|| Error::Schema(format!("auxiliary `{name}` is not a dataset covariate")))?;
        if let Some(row) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "auxiliary `{name}` is missing at row {}",
                row + 1
            )));
        }
        columns.push(name.clone());
        cols.push(v);
    }
    if cluster_size {
        columns.push(CLUSTER_SIZE_COLUMN.to_string());
        cols.push(d.participant_cluster_sizes().into_iter().map(|s| s as f64).collect());
    }
    let x = DMatrix::from_fn(d.len(), cols.len(), |i, j| cols[j][i]);

    let mut y = Vec::with_capacity(d.len());
    for (row, p) in d.participants().iter().enumerate() {
        let lc = match p.cost {
            Some(c) if c > 0.0 => Some(c.ln()),
            Some(c) => {
                return Err(Error::InvalidArgument(format!(
                    "row {}: observed cost {c} is not positive; filter zero costs before imputing on the log scale",
                    row + 1
                )))
            }
            None => None,
        };
        y.push([lc, p.qaly]);
    }

    let groups = d.rows_by_cluster();
    let mut cluster = vec![0; d.len()];
    let mut cluster_ids = Vec::with_capacity(groups.len());
    for (g, (id, rows)) in groups.into_iter().enumerate() {
        for r in rows {
            cluster[r] = g;
        }
        cluster_ids.push(id);
    }
    Ok(Design {
        columns,
        x,
        y,
        cluster,
        cluster_ids,
    })
}

/// Check that the columns of `x` are linearly independent; on failure name
/// the first column that is (numerically) a combination of earlier ones,
/// together with those earlier columns.
pub fn check_full_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let p = x.ncols();
    // Gram–Schmidt on scaled columns
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(p);
    for j in 0..p {
        let mut v = x.column(j).into_owned();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            return Err(Error::Collinear {
                columns: vec![names[j].clone()],
            });
        }
        v /= norm0;
        for _ in 0..2 {
            for b in &basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
        }
        let resid = v.norm();
        if resid < 1e-8 {
            let mut cols: Vec<String> = names[..j].to_vec();
            cols.push(names[j].clone());
            return Err(Error::Collinear { columns: cols });
        }
        basis.push(v / resid);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Arm, CovariateSchema, Participant};

    fn data() -> TrialDataset {
        let rows = (0..6)
            .map(|i| Participant {
                cluster_id: format!("k{}", i / 3),
                arm: Arm::Control,
                cost: if i == 2 { None } else { Some(10.0 + i as f64) },
                qaly: Some(0.5),
                covariates: vec![i as f64, (i % 2) as f64, 2.0 * i as f64, 3.0],
            })
            .collect();
        TrialDataset::from_participants(rows, CovariateSchema::continuous(&["epd", "eco", "eth", "const"])).unwrap()
    }

    #[test]
    fn column_counts() {
        let d = data();
        let aux: Vec<String> = ["epd", "eco", "eth"].iter().map(|s| s.to_string()).collect();
        assert_eq!(build_design(&d, &aux, false).unwrap().n_predictors(), 4);
        let des = build_design(&d, &aux, true).unwrap();
        assert_eq!(des.n_predictors(), 5);
        assert_eq!(des.columns[4], CLUSTER_SIZE_COLUMN);
        assert_eq!(des.x[(0, 4)], 3.0);
        let des = build_design(&d, &[], false).unwrap();
        assert_eq!(des.n_predictors(), 1);
        assert_eq!(des.n_missing(), 1);
        assert_eq!(des.y[0][0], Some(10f64.ln()));
        assert_eq!(des.cluster, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn unknown_auxiliary() {
        assert!(build_design(&data(), &["age".to_string()], false).is_err());
    }

    #[test]
    fn collinearity_names_columns() {
        let d = data();
        let aux: Vec<String> = ["epd", "eth"].iter().map(|s| s.to_string()).collect();
        let des = build_design(&d, &aux, false).unwrap();
        match check_full_rank(&des.x, &des.columns) {
            Err(Error::Collinear { columns }) => assert_eq!(columns.last().unwrap(), "eth"),
            other => panic!("{other:?}"),
        }
        let des = build_design(&d, &["const".to_string()], false).unwrap();
        match check_full_rank(&des.x, &des.columns) {
            Err(Error::Collinear { columns }) => assert_eq!(columns, vec![INTERCEPT, "const"]),
            other => panic!("{other:?}"),
        }
        let des = build_design(&d, &["epd".to_string(), "eco".to_string()], true).unwrap();
        assert!(check_full_rank(&des.x, &des.columns).is_err(), "cluster size is constant");
    }
}
