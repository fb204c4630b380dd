//! Two-arm cluster-randomized trial datasets.
//!
//! A dataset is an ordered list of participants (one row each) plus the
//! cluster table. Outcomes are optional; an empty CSV cell is a missing
//! value. Cluster size is the number of participants randomised in the
//! cluster and is fixed at load time: filtering rows never changes it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLUSTER_ID: &str = "cluster_id";
pub const ARM: &str = "arm";
pub const COST: &str = "cost";
pub const QALY: &str = "qaly";
/// Optional column carrying the randomised cluster size. Written by
/// [`TrialDataset::write_csv`] so that filtered or imputed datasets keep
/// the design value.
pub const CLUSTER_SIZE: &str = "cluster_size";

const RESERVED: [&str; 5] = [CLUSTER_ID, ARM, COST, QALY, CLUSTER_SIZE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Control,
    Intervention,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Intervention];

    pub fn code(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Intervention => 1,
        }
    }

    pub fn from_code(s: &str) -> Option<Arm> {
        match s.trim() {
            "0" => Some(Arm::Control),
            "1" => Some(Arm::Intervention),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Control => "control",
            Arm::Intervention => "intervention",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Binary,
    /// Ordinal scores are carried as numbers.
    Ordinal,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub columns: Vec<(String, CovariateKind)>,
}

impl CovariateSchema {
    pub fn new(columns: Vec<(String, CovariateKind)>) -> Self {
        Self { columns }
    }

    pub fn continuous<S: AsRef<str>>(names: &[S]) -> Self {
        Self {
            columns: names
                .iter()
                .map(|n| (n.as_ref().to_string(), CovariateKind::Continuous))
                .collect(),
        }
    }

    /// Treat every non-reserved header column as a continuous covariate.
    pub fn infer_from_header<S: AsRef<str>>(header: &[S]) -> Self {
        Self::continuous(
            &header
                .iter()
                .map(|h| h.as_ref())
                .filter(|h| !RESERVED.contains(h))
                .collect::<Vec<_>>(),
        )
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub cluster_id: String,
    pub arm: Arm,
    pub cost: Option<f64>,
    pub qaly: Option<f64>,
    /// Values aligned with the dataset's [`CovariateSchema`].
    pub covariates: Vec<f64>,
}

impl Participant {
    pub fn is_complete(&self) -> bool {
        self.cost.is_some() && self.qaly.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterInfo {
    pub cluster_id: String,
    pub size: usize,
    pub arm: Arm,
}

/// Response indicators: `true` when the value is observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingnessMask {
    pub r_cost: Vec<bool>,
    pub r_qaly: Vec<bool>,
}

impl MissingnessMask {
    pub fn missing_cost(&self) -> usize {
        self.r_cost.iter().filter(|r| !**r).count()
    }

    pub fn missing_qaly(&self) -> usize {
        self.r_qaly.iter().filter(|r| !**r).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    participants: Vec<Participant>,
    clusters: Vec<ClusterInfo>,
    schema: CovariateSchema,
}

impl TrialDataset {
    /// Build a dataset, checking that arms are constant within clusters and
    /// that every participant's cluster is listed.
    pub fn new(
        participants: Vec<Participant>,
        clusters: Vec<ClusterInfo>,
        schema: CovariateSchema,
    ) -> Result<Self> {
        let lookup: HashMap<&str, &ClusterInfo> =
            clusters.iter().map(|c| (c.cluster_id.as_str(), c)).collect();
        if lookup.len() != clusters.len() {
            return Err(Error::Consistency("duplicate cluster in cluster table".into()));
        }
        for (row, p) in participants.iter().enumerate() {
            let info = lookup.get(p.cluster_id.as_str()).ok_or_else(|| {
                Error::Consistency(format!("row {}: unknown cluster `{}`", row + 1, p.cluster_id))
            })?;
            if info.arm != p.arm {
                return Err(Error::Consistency(format!(
                    "cluster `{}` has rows in both arms",
                    p.cluster_id
                )));
            }
            if p.covariates.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "row {} has {} covariates, schema declares {}",
                    row + 1,
                    p.covariates.len(),
                    schema.len()
                )));
            }
            if let Some(c) = p.cost {
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::Consistency(format!("row {}: invalid cost {c}", row + 1)));
                }
            }
        }
        Ok(Self {
            participants,
            clusters,
            schema,
        })
    }

    /// Build from participant rows alone; cluster sizes are the row counts.
    pub fn from_participants(participants: Vec<Participant>, schema: CovariateSchema) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut info: HashMap<String, (usize, Arm)> = HashMap::new();
        for p in &participants {
            match info.get_mut(&p.cluster_id) {
                Some((n, arm)) => {
                    if *arm != p.arm {
                        return Err(Error::Consistency(format!(
                            "cluster `{}` has rows in both arms",
                            p.cluster_id
                        )));
                    }
                    *n += 1;
                }
                None => {
                    order.push(p.cluster_id.clone());
                    info.insert(p.cluster_id.clone(), (1, p.arm));
                }
            }
        }
        let clusters = order
            .into_iter()
            .map(|id| {
                let (size, arm) = info[&id];
                ClusterInfo {
                    cluster_id: id,
                    size,
                    arm,
                }
            })
            .collect();
        Self::new(participants, clusters, schema)
    }

    pub fn participants(&self) -> &[Participant] {
        &self.participants
    }

    pub fn clusters(&self) -> &[ClusterInfo] {
        &self.clusters
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.participants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.participants.is_empty()
    }

    pub fn mask(&self) -> MissingnessMask {
        MissingnessMask {
            r_cost: self.participants.iter().map(|p| p.cost.is_some()).collect(),
            r_qaly: self.participants.iter().map(|p| p.qaly.is_some()).collect(),
        }
    }

    pub fn cluster(&self, id: &str) -> Option<&ClusterInfo> {
        self.clusters.iter().find(|c| c.cluster_id == id)
    }

    /// Randomised size of each participant's cluster, in row order.
    pub fn participant_cluster_sizes(&self) -> Vec<usize> {
        let sizes: HashMap<&str, usize> = self
            .clusters
            .iter()
            .map(|c| (c.cluster_id.as_str(), c.size))
            .collect();
        self.participants
            .iter()
            .map(|p| sizes[p.cluster_id.as_str()])
            .collect()
    }

    /// Row indices grouped by cluster, in order of first appearance.
    /// Clusters without rows are omitted.
    pub fn rows_by_cluster(&self) -> Vec<(String, Vec<usize>)> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (row, p) in self.participants.iter().enumerate() {
            match index.get(p.cluster_id.as_str()) {
                Some(&g) => groups[g].1.push(row),
                None => {
                    index.insert(p.cluster_id.as_str(), groups.len());
                    groups.push((p.cluster_id.clone(), vec![row]));
                }
            }
        }
        groups
    }

    pub fn arms_present(&self) -> Vec<Arm> {
        Arm::BOTH
            .into_iter()
            .filter(|a| self.participants.iter().any(|p| p.arm == *a))
            .collect()
    }

    pub fn covariate(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.schema.index_of(name)?;
        Some(self.participants.iter().map(|p| p.covariates[j]).collect())
    }

    /// Same clusters and schema, new rows. Used for row subsets and for
    /// completed datasets.
    pub fn with_participants(&self, participants: Vec<Participant>) -> Result<Self> {
        Self::new(participants, self.clusters.clone(), self.schema.clone())
    }

    /// Rows for which `keep` holds; cluster sizes are unchanged.
    pub fn retain_rows<F: Fn(&Participant) -> bool>(&self, keep: F) -> Self {
        Self {
            participants: self.participants.iter().filter(|p| keep(p)).cloned().collect(),
            clusters: self.clusters.clone(),
            schema: self.schema.clone(),
        }
    }

    /// Drop rows with an observed cost that is not strictly positive.
    /// Missing-cost rows are kept.
    pub fn filter_positive_costs(&self) -> (Self, usize) {
        let kept = self.retain_rows(|p| p.cost.is_none_or(|c| c > 0.0));
        let removed = self.len() - kept.len();
        (kept, removed)
    }

    /// Rows with both outcomes observed.
    pub fn complete_cases(&self) -> Self {
        self.retain_rows(Participant::is_complete)
    }

    pub fn arm_subset(&self, arm: Arm) -> Self {
        Self {
            participants: self.participants.iter().filter(|p| p.arm == arm).cloned().collect(),
            clusters: self.clusters.iter().filter(|c| c.arm == arm).cloned().collect(),
            schema: self.schema.clone(),
        }
    }

    /// Partition into (control, intervention).
    pub fn split_by_arm(&self) -> Result<(Self, Self)> {
        let control = self.arm_subset(Arm::Control);
        let treated = self.arm_subset(Arm::Intervention);
        for (arm, d) in [(Arm::Control, &control), (Arm::Intervention, &treated)] {
            if d.is_empty() {
                return Err(Error::InvalidArgument(format!("{arm} arm has no participants")));
            }
        }
        Ok((control, treated))
    }

    /// Concatenate two datasets with the same schema (e.g. the two arms).
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.schema != other.schema {
            return Err(Error::Schema("cannot concatenate datasets with different schemas".into()));
        }
        let mut participants = self.participants.clone();
        participants.extend(other.participants.iter().cloned());
        let mut clusters = self.clusters.clone();
        for c in &other.clusters {
            if !clusters.iter().any(|k| k.cluster_id == c.cluster_id) {
                clusters.push(c.clone());
            }
        }
        Self::new(participants, clusters, self.schema.clone())
    }

    pub fn load_csv<P: AsRef<Path>>(path: P, schema: Option<&CovariateSchema>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, schema)
    }

    /// Parse a trial CSV. With `schema = None` every non-reserved column is
    /// taken as a continuous covariate.
    pub fn read_csv<R: Read>(reader: R, schema: Option<&CovariateSchema>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::Fields)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let col = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("missing mandatory column `{name}`")))
        };
        let (i_cluster, i_arm, i_cost, i_qaly) = (col(CLUSTER_ID)?, col(ARM)?, col(COST)?, col(QALY)?);
        let i_size = header.iter().position(|h| h == CLUSTER_SIZE);

        let schema = match schema {
            Some(s) => s.clone(),
            None => CovariateSchema::infer_from_header(&header),
        };
        let mut cov_idx = Vec::with_capacity(schema.len());
        for name in schema.names() {
            cov_idx.push(
                header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::Schema(format!("declared covariate `{name}` not in header")))?,
            );
        }
        for h in &header {
            if !RESERVED.contains(&h.as_str()) && schema.index_of(h).is_none() {
                return Err(Error::Schema(format!("column `{h}` is not in the covariate schema")));
            }
        }

        let mut participants = Vec::new();
        let mut declared_sizes: BTreeMap<String, usize> = BTreeMap::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let row = i + 1;
            let field = |j: usize| record.get(j).unwrap_or("");
            let cluster_id = field(i_cluster).to_string();
            if cluster_id.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: CLUSTER_ID.into(),
                    message: "empty cluster id".into(),
                });
            }
            let arm = Arm::from_code(field(i_arm)).ok_or_else(|| {
                Error::Schema(format!("row {row}: unknown arm label `{}`", field(i_arm)))
            })?;
            let cost = parse_optional(field(i_cost), row, COST)?;
            let qaly = parse_optional(field(i_qaly), row, QALY)?;
            if let Some(c) = cost {
                if c < 0.0 {
                    return Err(Error::Parse {
                        row,
                        column: COST.into(),
                        message: format!("negative cost {c}"),
                    });
                }
            }
            let mut covariates = Vec::with_capacity(cov_idx.len());
            for (j, name) in cov_idx.iter().zip(schema.names()) {
                match parse_optional(field(*j), row, name)? {
                    Some(v) => covariates.push(v),
                    None => {
                        return Err(Error::Parse {
                            row,
                            column: name.to_string(),
                            message: "missing covariate value (covariates must be complete)".into(),
                        })
                    }
                }
            }
            if let Some(js) = i_size {
                let n: usize = field(js).parse().map_err(|_| Error::Parse {
                    row,
                    column: CLUSTER_SIZE.into(),
                    message: format!("invalid cluster size `{}`", field(js)),
                })?;
                match declared_sizes.get(&cluster_id) {
                    Some(&m) if m != n => {
                        return Err(Error::Consistency(format!(
                            "cluster `{cluster_id}` declares sizes {m} and {n}"
                        )))
                    }
                    _ => {
                        declared_sizes.insert(cluster_id.clone(), n);
                    }
                }
            }
            participants.push(Participant {
                cluster_id,
                arm,
                cost,
                qaly,
                covariates,
            });
        }

        let mut d = Self::from_participants(participants, schema)?;
        if i_size.is_some() {
            for c in &mut d.clusters {
                let n = declared_sizes[&c.cluster_id];
                if n < c.size {
                    return Err(Error::Consistency(format!(
                        "cluster `{}` declares size {n} but has {} rows",
                        c.cluster_id, c.size
                    )));
                }
                c.size = n;
            }
        }
        Ok(d)
    }

    pub fn save_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Write the dataset. Floats use the shortest representation that
    /// parses back to the same value.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![CLUSTER_ID, ARM, COST, QALY, CLUSTER_SIZE];
        header.extend(self.schema.names());
        w.write_record(&header)?;
        let sizes = self.participant_cluster_sizes();
        for (p, n) in self.participants.iter().zip(sizes) {
            let mut rec = vec![
                p.cluster_id.clone(),
                p.arm.code().to_string(),
                p.cost.map(|v| v.to_string()).unwrap_or_default(),
                p.qaly.map(|v| v.to_string()).unwrap_or_default(),
                n.to_string(),
            ];
            rec.extend(p.covariates.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_optional(s: &str, row: usize, column: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("not a number: `{s}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("non-finite value `{s}`"),
        });
    }
    Ok(Some(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str) -> Result<TrialDataset> {
        TrialDataset::read_csv(text.as_bytes(), None)
    }

    #[test]
    fn blank_cost_cell_is_missing() {
        let d = read("cluster_id,arm,cost,qaly\na,0,10,0.1\na,0,12.5,0.2\nb,1,,0.3\nb,1,7,0.25\n").unwrap();
        assert_eq!(d.mask().r_cost, vec![true, true, false, true]);
        assert_eq!(d.mask().r_qaly, vec![true; 4]);
        assert_eq!(d.cluster("a").unwrap().size, 2);
        assert_eq!(d.participants()[2].cost, None);
    }

    #[test]
    fn cluster_in_both_arms_is_rejected() {
        let err = read("cluster_id,arm,cost,qaly\n7,0,1,0.1\n7,1,2,0.2\n").unwrap_err();
        assert!(matches!(err, Error::Consistency(_)), "{err}");
    }

    #[test]
    fn malformed_number_names_row_and_column() {
        let err = read("cluster_id,arm,cost,qaly\na,0,1,0.1\na,0,x1,0.2\n").unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "cost");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_arm_label() {
        let err = read("cluster_id,arm,cost,qaly\na,2,1,0.1\n").unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn header_must_match_schema() {
        let schema = CovariateSchema::continuous(&["epd"]);
        let err = TrialDataset::read_csv("cluster_id,arm,cost,qaly,age\na,0,1,0.1,30\n".as_bytes(), Some(&schema))
            .unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
        let err = TrialDataset::read_csv("cluster_id,arm,cost\na,0,1\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn missing_covariate_is_a_load_error() {
        let err = read("cluster_id,arm,cost,qaly,epd\na,0,1,0.1,\n").unwrap_err();
        assert!(matches!(err, Error::Parse { ref column, .. } if column == "epd"));
    }

    #[test]
    fn positive_cost_filter() {
        let d = read("cluster_id,arm,cost,qaly\na,0,5,0.1\na,0,0,0.2\na,0,,0.3\nb,1,1,0.1\n").unwrap();
        let (f, removed) = d.filter_positive_costs();
        assert_eq!(removed, 1);
        let costs: Vec<_> = f.participants().iter().map(|p| p.cost).collect();
        assert_eq!(costs, vec![Some(5.0), None, Some(1.0)]);
        // size is the randomised count
        assert_eq!(f.cluster("a").unwrap().size, 3);
        let (g, again) = f.filter_positive_costs();
        assert_eq!(again, 0);
        assert_eq!(g, f);
    }

    #[test]
    fn split_partitions_rows_and_clusters() {
        let d = read("cluster_id,arm,cost,qaly\na,0,5,0.1\nb,0,3,0.2\nc,1,4,0.3\nd,1,1,0.1\n").unwrap();
        let (c, t) = d.split_by_arm().unwrap();
        assert_eq!(c.clusters().len(), 2);
        assert_eq!(t.clusters().len(), 2);
        assert_eq!(c.len() + t.len(), d.len());
        assert!(c.participants().iter().all(|p| p.arm == Arm::Control));
        let single = c.split_by_arm();
        assert!(single.is_err());
    }

    #[test]
    fn declared_cluster_size_survives_round_trip() {
        let d = read("cluster_id,arm,cost,qaly\na,0,5,0.1\na,0,0,0.2\nb,1,3,0.3\n").unwrap();
        let (f, _) = d.filter_positive_costs();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let back = TrialDataset::read_csv(buf.as_slice(), None).unwrap();
        assert_eq!(back.cluster("a").unwrap().size, 2);
        assert_eq!(back.participants(), f.participants());
    }
}
