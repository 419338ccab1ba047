use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};

use super::{align_stations, Pollutant, StationMeta, StationSeries};
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 10] = [
    "station_id",
    "lat",
    "lon",
    "timestamp_utc",
    "pm25",
    "pm10",
    "co",
    "no2",
    "so2",
    "o3",
];

const TIMESTAMP_OUT: &str = "%Y-%m-%dT%H:%M:%SZ";

const NAIVE_FORMATS: [&str; 5] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H",
];

fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    if let Ok(ts) = DateTime::parse_from_rfc3339(raw) {
        return Some(ts.with_timezone(&Utc));
    }
    let naive = raw.strip_suffix('Z').unwrap_or(raw);
    NAIVE_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(naive, f).ok())
        .map(|n| n.and_utc())
}

struct Accum {
    meta: StationMeta,
    rows: BTreeMap<DateTime<Utc>, [Option<f64>; Pollutant::COUNT]>,
}

/// Reads a combined CSV file, or every `*.csv` file in a directory (in
/// file-name order). Returns one series per station, in order of first
/// appearance, all sharing one hourly time axis.
pub fn load_stations(path: &Path) -> Result<Vec<StationSeries>> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .collect();
        v.sort();
        if v.is_empty() {
            return Err(Error::invalid(format!("no .csv files in {}", path.display())));
        }
        v
    } else {
        vec![path.to_path_buf()]
    };

    let mut order: Vec<String> = Vec::new();
    let mut stations: HashMap<String, Accum> = HashMap::new();
    for file in &files {
        read_file(file, &mut order, &mut stations)?;
    }

    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let acc = stations.remove(&id).expect("recorded station");
        let start = *acc.rows.keys().next().expect("at least one row");
        let end = *acc.rows.keys().next_back().expect("at least one row");
        let hours = (end - start).num_hours() as usize + 1;
        let mut s = StationSeries::empty(acc.meta, start, hours);
        for (ts, vals) in acc.rows {
            let t = (ts - start).num_hours() as usize;
            for p in Pollutant::ALL {
                s.set(p, t, vals[p.index()]);
            }
        }
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("{}: no records", path.display())));
    }
    align_stations(&out)
}

fn read_file(
    file: &Path,
    order: &mut Vec<String>,
    stations: &mut HashMap<String, Accum>,
) -> Result<()> {
    let name = file.to_path_buf();
    let malformed = |line: u64, message: String| Error::MalformedCsv {
        file: name.clone(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(file)
        .map_err(|e| malformed(0, e.to_string()))?;
    let header = rdr.headers().map_err(|e| malformed(1, e.to_string()))?;
    if header.len() != CSV_HEADER.len() || header.iter().zip(CSV_HEADER).any(|(a, b)| a != b) {
        return Err(malformed(
            1,
            format!("expected header `{}`", CSV_HEADER.join(",")),
        ));
    }

    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(malformed(line, "empty station_id".into()));
        }
        let coord = |i: usize, what: &str| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| malformed(line, format!("bad {what} `{}`", &rec[i])))
        };
        let (lat, lon) = (coord(1, "lat")?, coord(2, "lon")?);
        let ts = parse_timestamp(&rec[3])
            .ok_or_else(|| malformed(line, format!("bad timestamp `{}`", &rec[3])))?;
        if ts.minute() != 0 || ts.second() != 0 || ts.nanosecond() != 0 {
            return Err(malformed(line, format!("timestamp `{}` is not on the hour", &rec[3])));
        }
        let mut vals = [None; Pollutant::COUNT];
        for p in Pollutant::ALL {
            let raw = &rec[4 + p.index()];
            if raw.is_empty() {
                continue;
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| malformed(line, format!("bad {} value `{raw}`", p.column())))?;
            // negative and non-finite readings are kept as missing
            vals[p.index()] = (v.is_finite() && v >= 0.0).then_some(v);
        }

        let acc = match stations.get_mut(&id) {
            Some(acc) => {
                if acc.meta.lat != lat || acc.meta.lon != lon {
                    return Err(malformed(
                        line,
                        format!("station {id} changes coordinates"),
                    ));
                }
                acc
            }
            None => {
                let meta = StationMeta::new(id.clone(), lat, lon)
                    .map_err(|e| malformed(line, e.to_string()))?;
                order.push(id.clone());
                stations.entry(id.clone()).or_insert(Accum {
                    meta,
                    rows: BTreeMap::new(),
                })
            }
        };
        if acc.rows.insert(ts, vals).is_some() {
            return Err(Error::DuplicateRecord {
                file: name.clone(),
                station: id,
                timestamp: ts.format(TIMESTAMP_OUT).to_string(),
            });
        }
    }
    Ok(())
}

/// Writes stations as one combined CSV. Hours where every pollutant is
/// missing are omitted. Values use the shortest representation that parses
/// back to the same `f64`.
pub fn write_stations<W: Write>(series: &[StationSeries], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::invalid(format!("csv write failed: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for s in series {
        let lat = s.meta.lat.to_string();
        let lon = s.meta.lon.to_string();
        for t in 0..s.hours() {
            let vals: Vec<Option<f64>> = Pollutant::ALL.iter().map(|&p| s.get(p, t)).collect();
            if vals.iter().all(Option::is_none) {
                continue;
            }
            let mut row = vec![
                s.id().to_string(),
                lat.clone(),
                lon.clone(),
                s.timestamp(t).format(TIMESTAMP_OUT).to_string(),
            ];
            row.extend(vals.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const HEAD: &str = "station_id,lat,lon,timestamp_utc,pm25,pm10,co,no2,so2,o3\n";

    #[test]
    fn two_stations() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{HEAD}a,40.0,116.0,2015-01-01T00:00:00Z,10,20,1.1,30,5,40\n\
             a,40.0,116.0,2015-01-01T01:00:00Z,12,22,1.2,31,6,41\n\
             b,39.5,116.5,2015-01-01 01:00:00,8,,1.0,25,4,50\n"
        );
        let s = load_stations(&write_tmp(&dir, "x.csv", &body)).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|s| s.hours() == 2));
        assert_eq!(s[0].get(Pollutant::Pm25, 1), Some(12.0));
        assert_eq!(s[1].get(Pollutant::Pm25, 0), None);
        assert_eq!(s[1].get(Pollutant::Pm10, 1), None);
        assert_eq!(s[1].get(Pollutant::O3, 1), Some(50.0));
    }

    #[test]
    fn negative_value_is_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEAD}a,40,116,2015-01-01T00:00:00Z,-3,20,1,30,5,40\n");
        let s = load_stations(&write_tmp(&dir, "x.csv", &body)).unwrap();
        assert_eq!(s[0].get(Pollutant::Pm25, 0), None);
        assert_eq!(s[0].get(Pollutant::Pm10, 0), Some(20.0));
    }

    #[test]
    fn unsorted_rows_equal_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [
            "a,40,116,2015-01-01T02:00:00Z,3,3,3,3,3,3\n",
            "a,40,116,2015-01-01T00:00:00Z,1,1,1,1,1,1\n",
            "a,40,116,2015-01-01T01:00:00Z,2,2,2,2,2,2\n",
        ];
        let shuffled = format!("{HEAD}{}{}{}", rows[0], rows[1], rows[2]);
        let sorted = format!("{HEAD}{}{}{}", rows[1], rows[2], rows[0]);
        let a = load_stations(&write_tmp(&dir, "a.csv", &shuffled)).unwrap();
        let b = load_stations(&write_tmp(&dir, "b.csv", &sorted)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{HEAD}a,40,116,2015-01-01T00:00:00Z,1,1,1,1,1,1\n\
             a,40,116,2015-01-01T01:00:00Z,oops,1,1,1,1,1\n"
        );
        match load_stations(&write_tmp(&dir, "x.csv", &body)) {
            Err(Error::MalformedCsv { line, file, .. }) => {
                assert_eq!(line, 3);
                assert!(file.ends_with("x.csv"), "{}", file.display());
            }
            other => panic!("{other:?}"),
        }
        let short = format!("{HEAD}a,40,116\n");
        assert!(matches!(
            load_stations(&write_tmp(&dir, "y.csv", &short)),
            Err(Error::MalformedCsv { line: 2, .. })
        ));
        let off_hour = format!("{HEAD}a,40,116,2015-01-01T00:30:00Z,1,1,1,1,1,1\n");
        assert!(load_stations(&write_tmp(&dir, "z.csv", &off_hour)).is_err());
    }

    #[test]
    fn duplicate_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{HEAD}a,40,116,2015-01-01T00:00:00Z,1,1,1,1,1,1\n\
             a,40,116,2015-01-01T00:00:00Z,2,2,2,2,2,2\n"
        );
        assert!(matches!(
            load_stations(&write_tmp(&dir, "x.csv", &body)),
            Err(Error::DuplicateRecord { .. })
        ));
    }

    #[test]
    fn directory_of_files_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_tmp(&dir, "1.csv", &format!("{HEAD}a,40.1,116.3,2015-01-01T00:00:00Z,0.1,0.2,0.30000000000000004,4,5,6\n"));
        write_tmp(&dir, "2.csv", &format!("{HEAD}b,40.2,116.4,2015-01-01T03:00:00Z,7,,9,10,11,12\n"));
        write_tmp(&dir, "notes.txt", "ignored");
        let s = load_stations(dir.path()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].hours(), 4);

        let mut buf = Vec::new();
        write_stations(&s, &mut buf).unwrap();
        let out = tempfile::tempdir().unwrap();
        let back = load_stations(&write_tmp(&out, "all.csv", std::str::from_utf8(&buf).unwrap())).unwrap();
        assert_eq!(back, s);
    }
}
