//! Shared plumbing for the command-line entry points: dataset selection,
//! evaluation subsets and the sensitivity ranking.

use nvcim_core::device::RngStream;
use nvcim_core::nn::{Dataset, Network, SecondOrderOptions};
use nvcim_core::swim::{sensitivity_rank, SensitivityOptions, SensitivityRank};

use crate::config::ExperimentConfig;
use crate::mnist;
use crate::models::ModelId;
use crate::synthetic::toy_dataset;
use crate::Error;

pub const TOY_TRAIN: usize = 2000;
pub const TOY_TEST: usize = 500;
pub const TOY_MARGIN: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    /// `(name, value)` pairs describing the data, for run metadata.
    pub meta: Vec<(String, String)>,
}

/// Training and test data for `model`: MNIST from [`mnist::default_dir`]
/// for LeNet, seeded synthetic data for the toy MLP.
pub fn load_data(model: ModelId, seed: u64) -> Result<Data, Error> {
    match model {
        ModelId::LeNet => {
            let dir = mnist::default_dir();
            let m = mnist::load_mnist(&dir)?;
            let meta = vec![
                ("data_dir".into(), dir.display().to_string()),
                ("train_sha256".into(), mnist::checksum(&m.train)),
                ("test_sha256".into(), mnist::checksum(&m.test)),
            ];
            Ok(Data {
                train: m.train,
                test: m.test,
                meta,
            })
        }
        ModelId::MlpToy => {
            let s = RngStream::new(seed).named("toy-data");
            let all = toy_dataset(TOY_TRAIN + TOY_TEST, TOY_MARGIN, &s);
            let rows: Vec<usize> = (0..all.len()).collect();
            let (tr, te) = rows.split_at(TOY_TRAIN);
            Ok(Data {
                train: all.subset(tr),
                test: all.subset(te),
                meta: vec![("data".into(), format!("synthetic toy, seed {seed}"))],
            })
        }
        other => Err(Error::Invalid(format!(
            "no bundled dataset for {other}; only lenet and mlp-toy are wired end to end"
        ))),
    }
}

fn head(data: &Dataset, n: usize) -> Dataset {
    if n == 0 || n >= data.len() {
        data.clone()
    } else {
        data.head(n)
    }
}

/// Evaluation sets and ranking for one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    /// Training subset driving in-loop accuracy checks.
    pub check: Dataset,
    pub test: Dataset,
    pub rank: SensitivityRank,
}

pub fn rank_for(net: &Network, train: &Dataset, cfg: &ExperimentConfig) -> Result<SensitivityRank, Error> {
    let opts = SensitivityOptions {
        second: SecondOrderOptions {
            rule: cfg.sensitivity_rule,
            ..SecondOrderOptions::default()
        },
        ..SensitivityOptions::default()
    };
    Ok(sensitivity_rank(net, &head(train, cfg.sensitivity_subset), &opts)?)
}

pub fn prepare(net: &Network, data: &Data, cfg: &ExperimentConfig) -> Result<Prepared, Error> {
    Ok(Prepared {
        check: head(&data.train, cfg.check_subset),
        test: head(&data.test, cfg.test_subset),
        rank: rank_for(net, &data.train, cfg)?,
    })
}

/// Metadata lines flagging any subsetting in effect.
pub fn subset_meta(data: &Data, p: &Prepared) -> Vec<(String, String)> {
    let mut m = data.meta.clone();
    m.push(("check_images".into(), format!("{} of {}", p.check.len(), data.train.len())));
    m.push(("test_images".into(), format!("{} of {}", p.test.len(), data.test.len())));
    m.push((
        "test_subset".into(),
        (p.test.len() < data.test.len()).to_string(),
    ));
    m
}
