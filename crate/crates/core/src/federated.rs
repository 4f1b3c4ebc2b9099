//! Federated training across parking-lot operators.
//!
//! A coordinator broadcasts the global model, each client trains on its own
//! windows, and the coordinator replaces the global model with the
//! sample-size weighted mean of the returned weights. Raw occupancy data
//! never leaves a client; only [`ModelWeights`] cross the boundary.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{TimeSeriesDataset, Window};
use crate::error::{Error, Result};
use crate::neural::{evaluate_mse, loss_and_grad, sgd_step_in_place, ModelWeights};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// One id per client dataset; empty means `client-0`, `client-1`, ...
    pub client_ids: Vec<String>,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 1,
            batch_size: 64,
            learning_rate: 1e-2,
            client_ids: Vec::new(),
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "rounds, local_epochs and batch_size must be positive (got {}, {}, {})",
                self.rounds, self.local_epochs, self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is not a finite non-negative number", self.learning_rate)));
        }
        Ok(())
    }

    /// Client ids for `n` datasets, checked for length and uniqueness.
    pub fn ids_for(&self, n: usize) -> Result<Vec<String>> {
        let ids: Vec<String> = if self.client_ids.is_empty() {
            (0..n).map(|k| format!("client-{k}")).collect()
        } else {
            self.client_ids.clone()
        };
        if ids.len() != n {
            return Err(Error::Config(format!("{} client ids for {n} datasets", ids.len())));
        }
        let mut sorted = ids.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("client ids must be unique".into()));
        }
        Ok(ids)
    }
}

/// Weights returned by one client for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub weights: ModelWeights,
    pub sample_count: usize,
}

/// Seed controlling the batch order of `client_id` in `round`.
pub fn batch_seed(seed: u64, client_id: &str, round: usize) -> u64 {
    rng::derive(seed, &[rng::label(client_id), round as u64])
}

/// Copies `global`, runs `local_epochs` passes of shuffled mini-batch SGD
/// over the training windows and returns the result with the training-pair
/// count.
pub fn local_train(
    global: &ModelWeights,
    dataset: &TimeSeriesDataset,
    cfg: &FederationConfig,
    seed: u64,
) -> Result<(ModelWeights, usize)> {
    cfg.validate()?;
    let train = dataset.train();
    if train.is_empty() {
        return Err(Error::Empty("client training set"));
    }
    let mut model = global.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut r = rng::seeded(seed);
    let mut batch: Vec<Window> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let (_, grad) = loss_and_grad(&model, &batch)?;
            sgd_step_in_place(&mut model, &grad, cfg.learning_rate)?;
        }
    }
    Ok((model, train.len()))
}

/// Coordinate-wise mean weighted by `n_j / sum(n)`, summed in client-id
/// order so the result does not depend on arrival order.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ModelWeights> {
    let first = updates.first().ok_or(Error::Empty("client updates"))?;
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::InvalidArgument("duplicate client id in updates".into()));
    }
    for u in &sorted {
        first.weights.check_compatible(&u.weights)?;
    }
    let total: usize = sorted.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("aggregate over zero total samples".into()));
    }
    let shape = first.weights.shape();
    let mut acc = vec![0.0; shape.parameter_count()];
    for u in sorted {
        let share = u.sample_count as f64 / total as f64;
        for (a, p) in acc.iter_mut().zip(u.weights.params()) {
            *a += share * p;
        }
    }
    ModelWeights::unflatten(&shape, &acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client_id: String,
    /// Locally trained model on its own training windows.
    pub train_mse: f64,
    /// Locally trained model on its own test windows.
    pub test_mse: Option<f64>,
    /// Model the client holds after the round on its test windows.
    pub global_test_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_index: usize,
    pub clients: Vec<ClientRound>,
    /// Test-size weighted mean of the clients' `global_test_mse`.
    pub global_test_mse: Option<f64>,
    pub duration_secs: f64,
}

fn maybe_mse(model: &ModelWeights, windows: &[Window]) -> Result<Option<f64>> {
    if windows.is_empty() {
        Ok(None)
    } else {
        evaluate_mse(model, windows).map(Some)
    }
}

fn weighted_test_mean(clients: &[ClientRound], datasets: &[&TimeSeriesDataset]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (c, d) in clients.iter().zip(datasets) {
        if let Some(m) = c.global_test_mse {
            sum += m * d.test().len() as f64;
            n += d.test().len();
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Runs `cfg.rounds` rounds of broadcast, parallel local training,
/// aggregation and evaluation.
pub fn run_federation(
    datasets: &[TimeSeriesDataset],
    initial: &ModelWeights,
    cfg: &FederationConfig,
) -> Result<(ModelWeights, Vec<RoundReport>)> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Empty("clients"));
    }
    let ids = cfg.ids_for(datasets.len())?;
    let refs: Vec<&TimeSeriesDataset> = datasets.iter().collect();
    let mut global = initial.clone();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let updates: Vec<ClientUpdate> = datasets
            .par_iter()
            .zip(ids.par_iter())
            .map(|(d, id)| {
                let (weights, sample_count) = local_train(&global, d, cfg, batch_seed(cfg.seed, id, round))?;
                Ok(ClientUpdate {
                    client_id: id.clone(),
                    weights,
                    sample_count,
                })
            })
            .collect::<Result<_>>()?;
        global = aggregate(&updates)?;
        let clients = updates
            .par_iter()
            .zip(datasets.par_iter())
            .map(|(u, d)| {
                Ok(ClientRound {
                    client_id: u.client_id.clone(),
                    train_mse: evaluate_mse(&u.weights, d.train())?,
                    test_mse: maybe_mse(&u.weights, d.test())?,
                    global_test_mse: maybe_mse(&global, d.test())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        log::debug!("federated round {round} done");
        reports.push(RoundReport {
            round_index: round,
            global_test_mse: weighted_test_mean(&clients, &refs),
            clients,
            duration_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok((global, reports))
}

/// The same loop without aggregation: every client keeps training its own
/// copy of `initial` on local data only. Returns the final per-client
/// models alongside the reports.
pub fn run_isolated_baseline(
    datasets: &[TimeSeriesDataset],
    initial: &ModelWeights,
    cfg: &FederationConfig,
) -> Result<(Vec<ModelWeights>, Vec<RoundReport>)> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Empty("clients"));
    }
    let ids = cfg.ids_for(datasets.len())?;
    let refs: Vec<&TimeSeriesDataset> = datasets.iter().collect();
    let mut models = vec![initial.clone(); datasets.len()];
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let results: Vec<(ModelWeights, ClientRound)> = models
            .par_iter()
            .zip(datasets.par_iter())
            .zip(ids.par_iter())
            .map(|((m, d), id)| {
                let (weights, _) = local_train(m, d, cfg, batch_seed(cfg.seed, id, round))?;
                let test = maybe_mse(&weights, d.test())?;
                let row = ClientRound {
                    client_id: id.clone(),
                    train_mse: evaluate_mse(&weights, d.train())?,
                    test_mse: test,
                    global_test_mse: test,
                };
                Ok((weights, row))
            })
            .collect::<Result<_>>()?;
        let (next, clients): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        models = next;
        reports.push(RoundReport {
            round_index: round,
            global_test_mse: weighted_test_mean(&clients, &refs),
            clients,
            duration_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok((models, reports))
}

#[derive(Serialize)]
struct CsvRow<'a> {
    round: usize,
    client: &'a str,
    train_mse: f64,
    test_mse: Option<f64>,
    global_test_mse: Option<f64>,
}

/// One CSV row per client per round.
pub fn write_round_reports<W: Write>(out: W, reports: &[RoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for c in &r.clients {
            w.serialize(CsvRow {
                round: r.round_index,
                client: &c.client_id,
                train_mse: c.train_mse,
                test_mse: c.test_mse,
                global_test_mse: c.global_test_mse,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("round report", e))?;
    Ok(())
}

pub fn save_round_reports(path: impl AsRef<Path>, reports: &[RoundReport]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_round_reports(file, reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, synthesize_series};
    use crate::neural::ModelShape;
    use proptest::prelude::*;

    fn dataset(seed: u64) -> TimeSeriesDataset {
        let s = synthesize_series(seed, 3, 12).unwrap();
        make_windows(&s, 4, 0.8).unwrap()
    }

    fn shape() -> ModelShape {
        ModelShape::lstm(3, 4)
    }

    fn update(id: &str, weights: ModelWeights, n: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id.into(),
            weights,
            sample_count: n,
        }
    }

    fn constant(value: f64) -> ModelWeights {
        let mut m = ModelWeights::zeros(&shape());
        m.params_mut().for_each(|p| *p = value);
        m
    }

    fn small_cfg(rounds: usize) -> FederationConfig {
        FederationConfig {
            rounds,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 9,
            ..FederationConfig::default()
        }
    }

    #[test]
    fn weighted_mean_example() {
        let agg = aggregate(&[update("a", constant(0.0), 1), update("b", constant(4.0), 3)]).unwrap();
        assert!(agg.params().all(|&p| p == 3.0));
    }

    #[test]
    fn identical_clients_are_a_fixed_point() {
        let m = ModelWeights::init(&shape(), 1).unwrap();
        let agg = aggregate(&[update("a", m.clone(), 7), update("b", m.clone(), 2), update("c", m.clone(), 5)]).unwrap();
        for (a, b) in agg.params().zip(m.params()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn matches_brute_force_weighted_mean() {
        let models: Vec<_> = (0..3).map(|s| ModelWeights::init(&shape(), s).unwrap()).collect();
        let weights = [2usize, 3, 5];
        let ups: Vec<_> = models
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(k, (m, n))| update(&format!("c{k}"), m.clone(), n))
            .collect();
        let agg = aggregate(&ups).unwrap().flatten();
        let flats: Vec<Vec<f64>> = models.iter().map(|m| m.flatten()).collect();
        for i in 0..agg.len() {
            let expect = (2.0 * flats[0][i] + 3.0 * flats[1][i] + 5.0 * flats[2][i]) / 10.0;
            assert!((agg[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(aggregate(&[]), Err(Error::Empty(_))));
        assert!(aggregate(&[update("a", constant(1.0), 0), update("b", constant(2.0), 0)]).is_err());
        let other = ModelWeights::zeros(&ModelShape::lstm(2, 4));
        assert!(matches!(
            aggregate(&[update("a", constant(1.0), 1), update("b", other, 1)]),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(aggregate(&[update("a", constant(1.0), 1), update("a", constant(1.0), 1)]).is_err());
    }

    #[test]
    fn local_train_examples() {
        let s = synthesize_series(1, 5, 20).unwrap();
        let d = make_windows(&s.truncated(100), 15, 0.8).unwrap();
        let global = ModelWeights::init(&shape(), 2).unwrap();
        let cfg = FederationConfig { learning_rate: 0.0, ..FederationConfig::default() };
        let (same, n) = local_train(&global, &d, &cfg, 3).unwrap();
        assert_eq!(n, 68);
        assert_eq!(same, global);

        let cfg = small_cfg(1);
        let a = local_train(&global, &d, &cfg, 3).unwrap().0;
        let b = local_train(&global, &d, &cfg, 3).unwrap().0;
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a, global);

        let bad = FederationConfig { local_epochs: 0, ..cfg };
        assert!(matches!(local_train(&global, &d, &bad, 3), Err(Error::Config(_))));
    }

    #[test]
    fn local_train_rejects_empty_training_set() {
        let d = TimeSeriesDataset {
            windows: Vec::new(),
            window_size: 4,
            split_index: 0,
        };
        let global = ModelWeights::zeros(&shape());
        assert!(matches!(
            local_train(&global, &d, &FederationConfig::default(), 0),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn zero_rate_leaves_model_unchanged() {
        let initial = ModelWeights::init(&shape(), 4).unwrap();
        let cfg = FederationConfig { learning_rate: 0.0, ..small_cfg(3) };
        let (fin, reports) = run_federation(&[dataset(1)], &initial, &cfg).unwrap();
        assert_eq!(fin, initial);
        assert_eq!(reports.len(), 3);
        let (_, iso) = run_isolated_baseline(&[dataset(1)], &initial, &cfg).unwrap();
        assert!(iso.windows(2).all(|w| w[0].clients[0].test_mse == w[1].clients[0].test_mse));
    }

    #[test]
    fn one_client_matches_isolated_training() {
        let initial = ModelWeights::init(&shape(), 5).unwrap();
        let cfg = small_cfg(4);
        let (fed, fed_reports) = run_federation(&[dataset(2)], &initial, &cfg).unwrap();
        let (iso, iso_reports) = run_isolated_baseline(&[dataset(2)], &initial, &cfg).unwrap();
        assert_eq!(fed.to_bytes(), iso[0].to_bytes());
        for (f, i) in fed_reports.iter().zip(&iso_reports) {
            assert_eq!(f.clients, i.clients);
            assert_eq!(f.global_test_mse, i.global_test_mse);
        }
    }

    #[test]
    fn reports_have_one_row_per_client_per_round() {
        let initial = ModelWeights::init(&shape(), 6).unwrap();
        let data = [dataset(3), dataset(4), dataset(5)];
        let (_, reports) = run_federation(&data, &initial, &small_cfg(2)).unwrap();
        assert_eq!(reports.len(), 2);
        assert!(reports.iter().all(|r| r.clients.len() == 3));
        let mut buf = Vec::new();
        write_round_reports(&mut buf, &reports).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("round,client,train_mse,test_mse,global_test_mse"));
        assert_eq!(lines.count(), 6);
    }

    #[test]
    fn federation_is_reproducible() {
        let initial = ModelWeights::init(&shape(), 7).unwrap();
        let data = [dataset(6), dataset(7)];
        let a = run_federation(&data, &initial, &small_cfg(2)).unwrap().0;
        let b = run_federation(&data, &initial, &small_cfg(2)).unwrap().0;
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn client_ids_are_checked() {
        let cfg = FederationConfig { client_ids: vec!["x".into()], ..small_cfg(1) };
        assert!(cfg.ids_for(2).is_err());
        let cfg = FederationConfig { client_ids: vec!["x".into(), "x".into()], ..small_cfg(1) };
        assert!(cfg.ids_for(2).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_is_convex(seeds in proptest::collection::vec(0u64..1000, 1..5), counts in proptest::collection::vec(1usize..50, 5)) {
            let models: Vec<_> = seeds.iter().map(|&s| ModelWeights::init(&shape(), s).unwrap()).collect();
            let ups: Vec<_> = models.iter().enumerate().map(|(k, m)| update(&format!("c{k}"), m.clone(), counts[k])).collect();
            let agg = aggregate(&ups).unwrap().flatten();
            let flats: Vec<Vec<f64>> = models.iter().map(|m| m.flatten()).collect();
            for (i, a) in agg.iter().enumerate() {
                let lo = flats.iter().map(|f| f[i]).fold(f64::INFINITY, f64::min);
                let hi = flats.iter().map(|f| f[i]).fold(f64::NEG_INFINITY, f64::max);
                let slack = 1e-15 * lo.abs().max(hi.abs());
                prop_assert!(*a >= lo - slack && *a <= hi + slack);
            }
        }

        #[test]
        fn aggregate_ignores_client_order(seed in 0u64..1000, rotate in 0usize..4) {
            let mut ups: Vec<_> = (0..4)
                .map(|k| update(&format!("c{k}"), ModelWeights::init(&shape(), seed + k as u64).unwrap(), k + 1))
                .collect();
            let a = aggregate(&ups).unwrap().to_bytes();
            ups.rotate_left(rotate);
            ups.swap(0, 3);
            prop_assert_eq!(a, aggregate(&ups).unwrap().to_bytes());
        }
    }
}
