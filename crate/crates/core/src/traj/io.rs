use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use super::{GeoPoint, Label, Trajectory};
use crate::error::{Error, Result};

const HEADER: [&str; 4] = ["traj_id", "t", "lat", "lon"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajFormat {
    /// `traj_id,t,lat,lon`. A trailing `label` column is read when present
    /// and never written.
    Csv,
    /// `traj_id,t,lat,lon,label`; the label column is required.
    LabeledCsv,
}

#[derive(Debug, Clone)]
pub struct ParseOutcome {
    pub trajectories: Vec<Trajectory>,
    /// Trajectories dropped for having fewer than two distinct points.
    pub dropped: usize,
}

pub fn parse_trajectories(path: impl AsRef<Path>, format: TrajFormat) -> Result<ParseOutcome> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trajectories(file, format)
}

pub fn read_trajectories<R: Read>(input: R, format: TrajFormat) -> Result<ParseOutcome> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);

    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyInput);
    }
    let has_label = match headers.len() {
        4 => false,
        5 if &headers[4] == "label" => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `traj_id,t,lat,lon[,label]`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            })
        }
    };
    if headers.iter().take(4).ne(HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `traj_id,t,lat,lon`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    if format == TrajFormat::LabeledCsv && !has_label {
        return Err(Error::Parse {
            line: 1,
            message: "labeled format requires a `label` column".into(),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<GeoPoint>, Option<Label>)> = HashMap::new();
    let mut rows = 0usize;

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Parse { line, message };
        rows += 1;

        let id = record[0].to_string();
        if id.is_empty() {
            return Err(bad("empty traj_id".into()));
        }
        let t = parse_time(&record[1]).map_err(bad)?;
        let lat: f64 = record[2].parse().map_err(|_| bad(format!("invalid lat `{}`", &record[2])))?;
        let lon: f64 = record[3].parse().map_err(|_| bad(format!("invalid lon `{}`", &record[3])))?;
        let point = GeoPoint::with_time(lat, lon, t).map_err(|e| bad(e.to_string()))?;
        let label = if has_label {
            Some(record[4].parse::<Label>().map_err(|e| bad(e.to_string()))?)
        } else {
            None
        };

        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            (Vec::new(), None)
        });
        entry.0.push(point);
        if entry.1.is_none() {
            entry.1 = label;
        }
    }
    if rows == 0 {
        return Err(Error::EmptyInput);
    }

    let mut trajectories = Vec::with_capacity(order.len());
    let mut dropped = 0;
    for id in order {
        let (mut points, label) = groups.remove(&id).expect("grouped id");
        if points.iter().all(|p| p.t.is_some()) {
            points.sort_by_key(|p| p.t);
        }
        let mut traj = Trajectory::new(id, points, label.unwrap_or(Label::Unknown));
        traj.dedup_consecutive();
        if traj.points.len() < 2 {
            dropped += 1;
            continue;
        }
        trajectories.push(traj);
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} trajectories with fewer than 2 distinct points");
    }
    Ok(ParseOutcome { trajectories, dropped })
}

fn parse_time(raw: &str) -> std::result::Result<Option<i64>, String> {
    if raw.is_empty() {
        return Ok(None);
    }
    if let Ok(v) = raw.parse::<i64>() {
        return Ok(Some(v));
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Ok(Some(dt.timestamp()));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Ok(Some(dt.and_utc().timestamp()));
        }
    }
    Err(format!("invalid timestamp `{raw}`"))
}

/// Writes trajectories in the ingestion CSV layout. Times are written as
/// integer epoch seconds; coordinates use the shortest round-trip decimal form.
pub fn write_trajectories<W: Write>(out: W, trajectories: &[Trajectory], format: TrajFormat) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    if format == TrajFormat::LabeledCsv {
        wtr.write_record(["traj_id", "t", "lat", "lon", "label"])?;
    } else {
        wtr.write_record(HEADER)?;
    }
    for traj in trajectories {
        for p in &traj.points {
            let t = p.t.map(|t| t.to_string()).unwrap_or_default();
            let lat = p.lat.to_string();
            let lon = p.lon.to_string();
            if format == TrajFormat::LabeledCsv {
                wtr.write_record([traj.id.as_str(), &t, &lat, &lon, traj.label.as_str()])?;
            } else {
                wtr.write_record([traj.id.as_str(), &t, &lat, &lon])?;
            }
        }
    }
    wtr.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ParseOutcome> {
        read_trajectories(s.as_bytes(), TrajFormat::Csv)
    }

    #[test]
    fn minimal_two_rows() {
        let out = parse("traj_id,t,lat,lon\na,0,30.0,104.0\na,1,30.1,104.1\n").unwrap();
        assert_eq!(out.trajectories.len(), 1);
        assert_eq!(out.trajectories[0].points.len(), 2);
        assert_eq!(out.dropped, 0);
    }

    #[test]
    fn out_of_range_lat_reports_line() {
        let err = parse("traj_id,t,lat,lon\na,0,30.0,104.0\na,1,91,104.1\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("latitude"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interleaved_ids_are_grouped_and_sorted() {
        let rows = [
            ("a", 5, 30.05, 104.05),
            ("b", 2, 31.02, 105.02),
            ("a", 1, 30.01, 104.01),
            ("b", 1, 31.01, 105.01),
            ("a", 3, 30.03, 104.03),
            ("b", 9, 31.09, 105.09),
            ("a", 2, 30.02, 104.02),
            ("b", 4, 31.04, 105.04),
            ("a", 4, 30.04, 104.04),
            ("b", 3, 31.03, 105.03),
        ];
        let mut csv = String::from("traj_id,t,lat,lon\n");
        for (id, t, lat, lon) in rows {
            csv.push_str(&format!("{id},{t},{lat},{lon}\n"));
        }
        let out = parse(&csv).unwrap();

        // oracle: group by hand, then sort each group by time
        type Rows = Vec<(i64, f64, f64)>;
        let mut expected: Vec<(&str, Rows)> = vec![("a", vec![]), ("b", vec![])];
        for (id, t, lat, lon) in rows {
            let g = expected.iter_mut().find(|g| g.0 == id).unwrap();
            g.1.push((t, lat, lon));
        }
        for g in &mut expected {
            g.1.sort_by_key(|r| r.0);
        }

        assert_eq!(out.trajectories.len(), 2);
        for (traj, (id, pts)) in out.trajectories.iter().zip(&expected) {
            assert_eq!(traj.id, *id);
            let got: Vec<(i64, f64, f64)> = traj.points.iter().map(|p| (p.t.unwrap(), p.lat, p.lon)).collect();
            assert_eq!(&got, pts);
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse(""), Err(Error::EmptyInput)));
        assert!(matches!(parse("traj_id,t,lat,lon\n"), Err(Error::EmptyInput)));
    }

    #[test]
    fn short_trajectories_are_dropped_and_counted() {
        let out = parse("traj_id,t,lat,lon\na,0,30,104\na,1,30,104\nb,0,30,104\nb,1,30.5,104\n").unwrap();
        assert_eq!(out.trajectories.len(), 1);
        assert_eq!(out.dropped, 1);
    }

    #[test]
    fn iso_timestamps_and_labels() {
        let csv = "traj_id,t,lat,lon,label\nx,2016-11-01T00:00:10Z,30,104,small_detour\nx,2016-11-01 00:00:05,30.1,104,small_detour\n";
        let out = read_trajectories(csv.as_bytes(), TrajFormat::LabeledCsv).unwrap();
        let traj = &out.trajectories[0];
        assert_eq!(traj.label, Label::SmallDetour);
        assert_eq!(traj.points[0].t, Some(1_477_958_405));
        assert_eq!(traj.points[0].lat, 30.1);
    }

    #[test]
    fn malformed_number_names_line() {
        let err = parse("traj_id,t,lat,lon\na,0,abc,104\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn write_then_read_is_identity() {
        let csv = "traj_id,t,lat,lon,label\nq,1,30.123456789012344,104.1,route_switch\nq,2,30.2,104.2,route_switch\n";
        let out = read_trajectories(csv.as_bytes(), TrajFormat::LabeledCsv).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &out.trajectories, TrajFormat::LabeledCsv).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), csv);
    }
}
