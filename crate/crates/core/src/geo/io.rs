use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::{CityMap, GeoError, GeoPoint, PoiCategory, PoiRecord};

#[derive(Deserialize)]
struct PoiRow {
    lon: f64,
    lat: f64,
    category: String,
}

#[derive(Deserialize)]
struct SeedRow {
    lon: f64,
    lat: f64,
}

fn parse_err(path: &Path, line: u64, msg: impl ToString) -> GeoError {
    GeoError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.to_string(),
    }
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<(), GeoError> {
    let header = rdr.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(parse_err(path, 1, format!("expected header {expected:?}, found {got:?}")));
    }
    Ok(())
}

/// Reads `lon,lat,category` rows. Category cells must carry the exact category label.
pub fn read_pois_csv(path: &Path) -> Result<Vec<PoiRecord>, GeoError> {
    let mut rdr = csv::Reader::from_path(path)?;
    check_header(path, &mut rdr, &["lon", "lat", "category"])?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<PoiRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e)
        })?;
        let line = out.len() as u64 + 2;
        let category: PoiCategory = row.category.parse().map_err(|e| parse_err(path, line, e))?;
        GeoPoint::new(row.lon, row.lat)
            .validate()
            .map_err(|e| parse_err(path, line, e))?;
        out.push(PoiRecord {
            lon: row.lon,
            lat: row.lat,
            category,
        });
    }
    Ok(out)
}

pub fn write_pois_csv(path: &Path, pois: &[PoiRecord]) -> Result<(), GeoError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lon", "lat", "category"])?;
    for p in pois {
        w.write_record([p.lon.to_string(), p.lat.to_string(), p.category.label().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `lon,lat` seed rows.
pub fn read_seeds_csv(path: &Path) -> Result<Vec<GeoPoint>, GeoError> {
    let mut rdr = csv::Reader::from_path(path)?;
    check_header(path, &mut rdr, &["lon", "lat"])?;
    rdr.deserialize::<SeedRow>()
        .map(|row| {
            row.map(|r| GeoPoint::new(r.lon, r.lat)).map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(path, line, e)
            })
        })
        .collect()
}

pub fn save_city_map(path: &Path, map: &CityMap) -> Result<(), GeoError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, map)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Loads and validates a city map.
pub fn load_city_map(path: &Path) -> Result<CityMap, GeoError> {
    let map: CityMap = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    map.validate()?;
    Ok(map)
}
