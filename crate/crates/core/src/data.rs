//! Parking occupancy series: CSV ingestion, synthetic generation and
//! sliding-window supervised datasets.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Occupancy rate history of one parking lot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub lot_id: String,
    pub timestamps: Vec<NaiveDateTime>,
    /// Occupied fraction of the lot, in `[0, 1]`.
    pub occupancy: Vec<f64>,
    pub capacity: u32,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    /// The first `len` observations.
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.len());
        Self {
            lot_id: self.lot_id.clone(),
            timestamps: self.timestamps[..len].to_vec(),
            occupancy: self.occupancy[..len].to_vec(),
            capacity: self.capacity,
        }
    }
}

/// Column names used to locate fields when the CSV carries a header row.
///
/// Without a header the first four columns are read positionally in the order
/// lot id, capacity, occupied count, timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvColumns {
    pub lot_id: String,
    pub capacity: String,
    pub occupied: String,
    pub timestamp: String,
    pub timestamp_format: String,
}

impl Default for CsvColumns {
    fn default() -> Self {
        Self {
            lot_id: "SystemCodeNumber".into(),
            capacity: "Capacity".into(),
            occupied: "Occupancy".into(),
            timestamp: "LastUpdated".into(),
            timestamp_format: "%Y-%m-%d %H:%M:%S".into(),
        }
    }
}

/// Loads the Birmingham parking export with its stock column names.
pub fn load_birmingham_csv(path: impl AsRef<Path>, lot_ids: &[String]) -> Result<Vec<RawSeries>> {
    load_parking_csv(path, lot_ids, &CsvColumns::default())
}

pub fn load_parking_csv(
    path: impl AsRef<Path>,
    lot_ids: &[String],
    columns: &CsvColumns,
) -> Result<Vec<RawSeries>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_parking_csv(file, lot_ids, columns)
}

struct ColumnIndex {
    lot: usize,
    capacity: usize,
    occupied: usize,
    timestamp: usize,
}

/// Parses parking rows from any reader. One series is returned per requested
/// lot, in request order.
pub fn read_parking_csv<R: Read>(
    reader: R,
    lot_ids: &[String],
    columns: &CsvColumns,
) -> Result<Vec<RawSeries>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let wanted: HashMap<&str, usize> = lot_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut rows: Vec<BTreeMap<NaiveDateTime, (u32, f64)>> = vec![BTreeMap::new(); lot_ids.len()];
    let mut index = ColumnIndex {
        lot: 0,
        capacity: 1,
        occupied: 2,
        timestamp: 3,
    };

    for (i, record) in csv.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if i == 0 {
            if let Some(found) = header_index(&record, columns) {
                index = found;
                continue;
            }
        }
        let field = |idx: usize, name: &str| {
            record.get(idx).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing {name} column (index {idx})"),
            })
        };
        let lot = field(index.lot, "lot id")?;
        let Some(&slot) = wanted.get(lot) else {
            continue;
        };
        let capacity: u32 = field(index.capacity, "capacity")?
            .parse()
            .map_err(|e| Error::Parse {
                row,
                message: format!("capacity: {e}"),
            })?;
        if capacity == 0 {
            return Err(Error::Parse {
                row,
                message: "capacity must be positive".into(),
            });
        }
        let occupied: f64 = field(index.occupied, "occupied count")?
            .parse()
            .map_err(|e| Error::Parse {
                row,
                message: format!("occupied count: {e}"),
            })?;
        if !occupied.is_finite() {
            return Err(Error::Parse {
                row,
                message: "occupied count is not finite".into(),
            });
        }
        let ts_text = field(index.timestamp, "timestamp")?;
        let ts = NaiveDateTime::parse_from_str(ts_text, &columns.timestamp_format).map_err(|e| {
            Error::Parse {
                row,
                message: format!("timestamp `{ts_text}`: {e}"),
            }
        })?;
        let rate = (occupied / f64::from(capacity)).clamp(0.0, 1.0);
        // First occurrence of a timestamp wins.
        rows[slot].entry(ts).or_insert((capacity, rate));
    }

    lot_ids
        .iter()
        .zip(rows)
        .map(|(id, entries)| {
            let capacity = entries
                .values()
                .next()
                .map(|&(c, _)| c)
                .ok_or_else(|| Error::MissingLot(id.clone()))?;
            let (timestamps, occupancy) = entries.into_iter().map(|(t, (_, o))| (t, o)).unzip();
            Ok(RawSeries {
                lot_id: id.clone(),
                timestamps,
                occupancy,
                capacity,
            })
        })
        .collect()
}

fn header_index(record: &csv::StringRecord, columns: &CsvColumns) -> Option<ColumnIndex> {
    let find = |name: &str| record.iter().position(|f| f.eq_ignore_ascii_case(name));
    Some(ColumnIndex {
        lot: find(&columns.lot_id)?,
        capacity: find(&columns.capacity)?,
        occupied: find(&columns.occupied)?,
        timestamp: find(&columns.timestamp)?,
    })
}

/// Shape of the synthetic occupancy process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub base: f64,
    /// Peak height of the daily hump above `base`.
    pub daily_amplitude: f64,
    /// Drift added per elapsed day.
    pub trend_per_day: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_std: f64,
    pub capacity: u32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            base: 0.25,
            daily_amplitude: 0.5,
            trend_per_day: 0.005,
            noise_std: 0.05,
            capacity: 200,
        }
    }
}

pub fn synthesize_series(seed: u64, days: usize, slots_per_day: usize) -> Result<RawSeries> {
    synthesize_series_with(&SynthParams::default(), seed, days, slots_per_day)
}

/// Daily half-sine occupancy hump plus a linear trend and seeded noise,
/// clipped to `[0, 1]`.
pub fn synthesize_series_with(
    params: &SynthParams,
    seed: u64,
    days: usize,
    slots_per_day: usize,
) -> Result<RawSeries> {
    if days < 1 {
        return Err(Error::InvalidArgument("days must be at least 1".into()));
    }
    if !(2..=1440).contains(&slots_per_day) {
        return Err(Error::InvalidArgument(format!(
            "slots_per_day must lie in [2, 1440], got {slots_per_day}"
        )));
    }
    if params.noise_std < 0.0 || !params.noise_std.is_finite() {
        return Err(Error::InvalidArgument("noise_std must be finite and non-negative".into()));
    }

    // 30-minute grid opening at 08:00 when the day fits, finer otherwise.
    let spacing = (1440 / slots_per_day as i64).min(30);
    let opening = if spacing * slots_per_day as i64 <= 16 * 60 { 8 * 60 } else { 0 };
    let origin = NaiveDate::from_ymd_opt(2016, 10, 4)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid origin date");

    let noise = Normal::new(0.0, params.noise_std).expect("validated noise std");
    let mut rng = rng::seeded(seed);
    let n = days * slots_per_day;
    let mut timestamps = Vec::with_capacity(n);
    let mut occupancy = Vec::with_capacity(n);
    for day in 0..days {
        for slot in 0..slots_per_day {
            let k = day * slots_per_day + slot;
            timestamps.push(
                origin
                    + Duration::days(day as i64)
                    + Duration::minutes(opening + spacing * slot as i64),
            );
            let phase = std::f64::consts::PI * slot as f64 / (slots_per_day - 1) as f64;
            let mut v = params.base
                + params.daily_amplitude * phase.sin()
                + params.trend_per_day * k as f64 / slots_per_day as f64;
            if params.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            occupancy.push(v.clamp(0.0, 1.0));
        }
    }

    Ok(RawSeries {
        lot_id: format!("synthetic-{seed}"),
        timestamps,
        occupancy,
        capacity: params.capacity,
    })
}

/// One supervised example: `window` consecutive values and the next one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub input: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub windows: Vec<Window>,
    pub window_size: usize,
    /// Number of leading windows used for training; the rest are held out.
    pub split_index: usize,
}

impl TimeSeriesDataset {
    pub fn train(&self) -> &[Window] {
        &self.windows[..self.split_index]
    }

    pub fn test(&self) -> &[Window] {
        &self.windows[self.split_index..]
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Slides a window of `window_size` over the series. A series of `y` points
/// yields `y - window_size` (input, next value) pairs; the first
/// `max(1, floor(train_fraction * pairs))` are the training split.
pub fn make_windows(
    series: &RawSeries,
    window_size: usize,
    train_fraction: f64,
) -> Result<TimeSeriesDataset> {
    if window_size == 0 {
        return Err(Error::InvalidArgument("window size must be positive".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let values = &series.occupancy;
    if values.len() < window_size + 1 {
        return Err(Error::SeriesTooShort {
            required: window_size + 1,
            actual: values.len(),
        });
    }

    let windows: Vec<Window> = values
        .windows(window_size + 1)
        .map(|w| Window {
            input: w[..window_size].to_vec(),
            target: w[window_size],
        })
        .collect();
    // At least one training window, even when the floor rounds to zero.
    let split_index = ((train_fraction * windows.len() as f64).floor() as usize).max(1);

    Ok(TimeSeriesDataset {
        windows,
        window_size,
        split_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: Vec<f64>) -> RawSeries {
        let origin = NaiveDate::from_ymd_opt(2020, 1, 1)
            .unwrap()
            .and_hms_opt(8, 0, 0)
            .unwrap();
        RawSeries {
            lot_id: "test".into(),
            timestamps: (0..values.len())
                .map(|i| origin + Duration::minutes(30 * i as i64))
                .collect(),
            occupancy: values,
            capacity: 10,
        }
    }

    const SAMPLE: &str = "\
SystemCodeNumber,Capacity,Occupancy,LastUpdated
BHMEURBRD01,100,30,2016-10-04 08:00:00
BHMEURBRD01,100,120,2016-10-04 08:30:00
BHMEURBRD01,100,50,2016-10-04 08:30:00
BHMEURBRD01,100,40,2016-10-04 07:30:00
BHMEURBRD02,50,10,2016-10-04 08:00:00
Bull Ring,1000,250,2016-10-04 08:00:00
Other,10,1,2016-10-04 08:00:00
";

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_ratio_clamp_sort_and_dedup() {
        let out = read_parking_csv(
            SAMPLE.as_bytes(),
            &ids(&["BHMEURBRD01", "BHMEURBRD02", "Bull Ring"]),
            &CsvColumns::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 3);
        let a = &out[0];
        assert_eq!(a.capacity, 100);
        // Sorted: 07:30 (0.40), 08:00 (0.30), 08:30 (first row wins: 120 -> clamped 1.0).
        assert_eq!(a.occupancy, vec![0.40, 0.30, 1.0]);
        assert!(a.timestamps.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(out[2].occupancy, vec![0.25]);
    }

    #[test]
    fn headerless_rows_are_positional() {
        let text = "L1,100,30,2016-10-04 08:00:00\nL1,100,60,2016-10-04 08:30:00\n";
        let out = read_parking_csv(text.as_bytes(), &ids(&["L1"]), &CsvColumns::default()).unwrap();
        assert_eq!(out[0].occupancy, vec![0.3, 0.6]);
    }

    #[test]
    fn missing_lot_is_reported() {
        let err = read_parking_csv(SAMPLE.as_bytes(), &ids(&["Nowhere"]), &CsvColumns::default())
            .unwrap_err();
        assert!(matches!(err, Error::MissingLot(ref id) if id == "Nowhere"));
    }

    #[test]
    fn non_numeric_field_names_the_row() {
        let text = "SystemCodeNumber,Capacity,Occupancy,LastUpdated\nL1,100,30,2016-10-04 08:00:00\nL1,abc,30,2016-10-04 08:30:00\n";
        let err = read_parking_csv(text.as_bytes(), &ids(&["L1"]), &CsvColumns::default()).unwrap_err();
        match err {
            Error::Parse { row, message } => {
                assert_eq!(row, 3);
                assert!(message.contains("capacity"));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_birmingham_csv("/definitely/not/here.csv", &ids(&["x"])).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn synthesis_is_deterministic_and_sized() {
        let a = synthesize_series(7, 2, 19).unwrap();
        let b = synthesize_series(7, 2, 19).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 38);
        assert!(a.timestamps.windows(2).all(|w| w[0] < w[1]));
        assert!(a.occupancy.iter().all(|v| (0.0..=1.0).contains(v)));
        let c = synthesize_series(8, 2, 19).unwrap();
        assert_ne!(a.occupancy, c.occupancy);
    }

    #[test]
    fn noiseless_synthesis_is_pure_signal() {
        let params = SynthParams {
            noise_std: 0.0,
            ..SynthParams::default()
        };
        let s = synthesize_series_with(&params, 1, 3, 10).unwrap();
        for (k, v) in s.occupancy.iter().enumerate() {
            let slot = k % 10;
            let expected = params.base
                + params.daily_amplitude * (std::f64::consts::PI * slot as f64 / 9.0).sin()
                + params.trend_per_day * k as f64 / 10.0;
            assert_eq!(*v, expected);
        }
    }

    #[test]
    fn synthesis_rejects_bad_shapes() {
        assert!(synthesize_series(1, 0, 19).is_err());
        assert!(synthesize_series(1, 1, 1).is_err());
    }

    #[test]
    fn window_examples() {
        let s = series((0..10).map(|v| v as f64 / 10.0).collect());
        let d = make_windows(&s, 3, 0.5).unwrap();
        assert_eq!(d.len(), 7);
        assert_eq!(d.windows[0].input, vec![0.0, 0.1, 0.2]);
        assert_eq!(d.windows[0].target, 0.3);

        let s = series(vec![0.5; 16]);
        let d = make_windows(&s, 15, 0.8).unwrap();
        assert_eq!((d.len(), d.split_index), (1, 1));

        let s = series(vec![0.5; 100]);
        let d = make_windows(&s, 15, 0.8).unwrap();
        assert_eq!(d.len(), 85);
        assert_eq!(d.split_index, 68);
        assert_eq!(d.train().len(), 68);
        assert_eq!(d.test().len(), 17);
    }

    #[test]
    fn short_series_names_minimum() {
        let s = series(vec![0.1; 5]);
        match make_windows(&s, 5, 0.8).unwrap_err() {
            Error::SeriesTooShort { required, actual } => {
                assert_eq!((required, actual), (6, 5));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn split_keeps_one_training_window_and_rejects_bad_fractions() {
        let s = series(vec![0.1; 4]);
        assert_eq!(make_windows(&s, 2, 0.4).unwrap().split_index, 1);
        assert!(make_windows(&s, 2, 1.0).is_err());
        assert!(make_windows(&s, 2, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn window_count_and_reconstruction(
            values in prop::collection::vec(0.0f64..1.0, 2..120),
            z in 1usize..20,
        ) {
            prop_assume!(values.len() > z);
            let s = series(values.clone());
            let d = make_windows(&s, z, 0.8).unwrap();
            prop_assert_eq!(d.len(), values.len() - z);
            prop_assert!(d.split_index >= 1 && d.split_index <= d.len());
            for (k, w) in d.windows.iter().enumerate() {
                let mut joined = w.input.clone();
                joined.push(w.target);
                prop_assert_eq!(&joined[..], &values[k..=k + z]);
            }
        }
    }
}
