//! Data model and ingestion: tiles, county SVI ground truth, and the seeded
//! synthetic world used by every desk-scale experiment.
//!
//! The synthetic world gives each county a latent attribute profile; tiles
//! inherit the profile with per-field caption noise, and the county SVI is a
//! clamped affine function of the profile's one-hot encoding, so the
//! attribute -> SVI link is recomputable by tests.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{
    self, CarsPresent, EnvFeature, FieldId, HouseSize, Road, RoofCondition, RoofType,
    StructuredAttributes, YardFeature,
};
use crate::prompting::{CaptionRecord, CaptionSource};
use crate::seeds;

/// One satellite image tile assigned to a county.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatTile {
    pub tile_id: String,
    pub county_fips: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    /// Hidden ground truth, synthetic mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_attributes: Option<StructuredAttributes>,
}

pub fn is_valid_fips(fips: &str) -> bool {
    fips.len() == 5 && fips.bytes().all(|b| b.is_ascii_digit())
}

/// SVI theme names carried alongside the overall percentile.
pub const SVI_THEMES: [&str; 4] = [
    "socioeconomic_status",
    "household_composition",
    "minority_status_language",
    "housing_type_transportation",
];

/// County-level Social Vulnerability Index record; percentiles in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SviRecord {
    pub county_fips: String,
    pub svi_overall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theme_scores: Option<BTreeMap<String, f64>>,
}

impl SviRecord {
    fn validate(&self) -> Result<()> {
        if !is_valid_fips(&self.county_fips) {
            return Err(Error::Validation(format!(
                "malformed FIPS {:?}",
                self.county_fips
            )));
        }
        if !(0.0..=1.0).contains(&self.svi_overall) || !self.svi_overall.is_finite() {
            return Err(Error::Validation(format!(
                "svi_overall {} for county {} outside [0, 1]",
                self.svi_overall, self.county_fips
            )));
        }
        if let Some(themes) = &self.theme_scores {
            for (name, score) in themes {
                if !SVI_THEMES.contains(&name.as_str()) {
                    return Err(Error::Validation(format!("unknown SVI theme {name:?}")));
                }
                if !(0.0..=1.0).contains(score) {
                    return Err(Error::Validation(format!(
                        "theme {name} score {score} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Configuration of the seeded synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldConfig {
    pub seed: u64,
    pub n_counties: usize,
    pub tiles_per_county: usize,
    /// Probability that a tile attribute deviates from the county latent.
    pub caption_noise_rate: f64,
    /// Weights of the one-hot attribute slots in the SVI link; empty means
    /// "derive from the seed". See [`default_link_weights`].
    #[serde(default)]
    pub svi_link_weights: Vec<f64>,
}

impl SyntheticWorldConfig {
    pub fn new(seed: u64, n_counties: usize, tiles_per_county: usize, noise: f64) -> Self {
        SyntheticWorldConfig {
            seed,
            n_counties,
            tiles_per_county,
            caption_noise_rate: noise,
            svi_link_weights: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_counties < 1 || self.tiles_per_county < 1 {
            return Err(Error::Validation(
                "n_counties and tiles_per_county must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.caption_noise_rate) {
            return Err(Error::Validation(format!(
                "caption_noise_rate {} outside [0, 1]",
                self.caption_noise_rate
            )));
        }
        if !self.svi_link_weights.is_empty() && self.svi_link_weights.len() != grammar::one_hot_dim()
        {
            return Err(Error::Validation(format!(
                "svi_link_weights must have {} entries (one per one-hot slot), got {}",
                grammar::one_hot_dim(),
                self.svi_link_weights.len()
            )));
        }
        Ok(())
    }

    pub fn link_weights(&self) -> Vec<f64> {
        if self.svi_link_weights.is_empty() {
            default_link_weights(self.seed)
        } else {
            self.svi_link_weights.clone()
        }
    }
}

/// Seed-derived link weights, uniform in [-0.12, 0.12] per one-hot slot.
pub fn default_link_weights(seed: u64) -> Vec<f64> {
    let mut rng = seeds::stream(seed, "link-weights", 0);
    (0..grammar::one_hot_dim())
        .map(|_| rng.random_range(-0.12..0.12))
        .collect()
}

const SVI_LINK_BIAS: f64 = 0.5;

/// The ground-truth SVI of a latent profile: clamp(bias + w . one_hot(attrs)).
pub fn svi_from_attributes(attrs: &StructuredAttributes, weights: &[f64]) -> f64 {
    let x = grammar::one_hot(attrs);
    let raw: f64 = SVI_LINK_BIAS + x.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>();
    raw.clamp(0.0, 1.0)
}

/// A generated synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub tiles: Vec<SatTile>,
    pub svi: BTreeMap<String, SviRecord>,
    pub captions: Vec<CaptionRecord>,
}

fn sample_profile(rng: &mut ChaCha8Rng) -> StructuredAttributes {
    fn pick<T: Copy>(rng: &mut ChaCha8Rng, known: &[T]) -> T {
        known[rng.random_range(0..known.len())]
    }
    let mut attrs = StructuredAttributes {
        roof_type: pick(rng, RoofType::KNOWN),
        roof_condition: pick(rng, RoofCondition::KNOWN),
        house_size: pick(rng, HouseSize::KNOWN),
        road: pick(rng, Road::KNOWN),
        cars_present: pick(rng, CarsPresent::KNOWN),
        ..Default::default()
    };
    for &e in EnvFeature::KNOWN {
        if rng.random_bool(0.35) {
            attrs.environment.insert(e);
        }
    }
    for &y in YardFeature::KNOWN {
        if rng.random_bool(0.35) {
            attrs.yard.insert(y);
        }
    }
    attrs
}

/// Resample one field of `attrs` uniformly from its vocabulary (enums) or as
/// a fresh subset (sets).
fn resample_field(attrs: &mut StructuredAttributes, field: FieldId, rng: &mut ChaCha8Rng) {
    fn pick<T: Copy>(rng: &mut ChaCha8Rng, known: &[T]) -> T {
        known[rng.random_range(0..known.len())]
    }
    match field {
        FieldId::RoofType => attrs.roof_type = pick(rng, RoofType::KNOWN),
        FieldId::RoofCondition => attrs.roof_condition = pick(rng, RoofCondition::KNOWN),
        FieldId::HouseSize => attrs.house_size = pick(rng, HouseSize::KNOWN),
        FieldId::Road => attrs.road = pick(rng, Road::KNOWN),
        FieldId::CarsPresent => attrs.cars_present = pick(rng, CarsPresent::KNOWN),
        FieldId::Environment => {
            let mut set = BTreeSet::new();
            for &e in EnvFeature::KNOWN {
                if rng.random_bool(0.35) {
                    set.insert(e);
                }
            }
            attrs.environment = set;
        }
        FieldId::Yard => {
            let mut set = BTreeSet::new();
            for &y in YardFeature::KNOWN {
                if rng.random_bool(0.35) {
                    set.insert(y);
                }
            }
            attrs.yard = set;
        }
    }
}

fn county_fips_for(index: usize) -> String {
    format!("{:05}", 1001 + index)
}

/// The latent profile of county `index` under `seed`; exposed so experiments
/// can regenerate worlds with more tiles per county without moving profiles.
pub fn county_profile(seed: u64, index: usize) -> StructuredAttributes {
    let mut rng = seeds::stream(seed, "profile", index as u64);
    sample_profile(&mut rng)
}

/// The noised attributes of one tile. Independent substream per tile, so the
/// set of tiles for a county extends without disturbing earlier tiles.
pub fn tile_attributes(
    seed: u64,
    county_index: usize,
    tile_index: usize,
    profile: &StructuredAttributes,
    noise_rate: f64,
) -> StructuredAttributes {
    let mut rng = seeds::stream(
        seed,
        "tile",
        (county_index as u64) << 32 | tile_index as u64,
    );
    let mut attrs = profile.clone();
    for field in FieldId::ALL {
        if noise_rate > 0.0 && rng.random_bool(noise_rate) {
            resample_field(&mut attrs, field, &mut rng);
        }
    }
    attrs
}

/// Generate the synthetic world. Fully reproducible from the config; captions
/// are grammar renders of the tile attributes, with the render seed derived
/// from the attribute content so equal attributes yield equal captions.
pub fn synth_world(config: &SyntheticWorldConfig) -> Result<World> {
    config.validate()?;
    let weights = config.link_weights();
    let mut tiles = Vec::new();
    let mut svi = BTreeMap::new();
    let mut captions = Vec::new();

    for c in 0..config.n_counties {
        let fips = county_fips_for(c);
        let profile = county_profile(config.seed, c);
        let overall = svi_from_attributes(&profile, &weights);
        let mut themes = BTreeMap::new();
        let mut theme_rng = seeds::stream(config.seed, "themes", c as u64);
        for name in SVI_THEMES {
            let offset: f64 = theme_rng.random_range(-0.1..0.1);
            themes.insert(name.to_string(), (overall + offset).clamp(0.0, 1.0));
        }
        svi.insert(
            fips.clone(),
            SviRecord {
                county_fips: fips.clone(),
                svi_overall: overall,
                theme_scores: Some(themes),
            },
        );

        for t in 0..config.tiles_per_county {
            let attrs = tile_attributes(config.seed, c, t, &profile, config.caption_noise_rate);
            let tile_id = format!("{fips}_{t:03}");
            let render_seed = seeds::derive(
                config.seed,
                "caption",
                crate::text::fnv1a(serde_json::to_string(&attrs).unwrap().as_bytes()),
            );
            let text = grammar::render_caption(&attrs, render_seed);
            captions.push(CaptionRecord {
                tile_id: tile_id.clone(),
                tier: 2,
                source: CaptionSource::Grammar,
                text: text.clone(),
                attributes: grammar::parse_attributes(&text),
                truncated: false,
            });
            tiles.push(SatTile {
                tile_id,
                county_fips: fips.clone(),
                image_uri: None,
                lat: None,
                lon: None,
                latent_attributes: Some(attrs),
            });
        }
    }
    Ok(World {
        tiles,
        svi,
        captions,
    })
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

/// Load tiles from a JSON-lines manifest, preserving file order.
pub fn load_tiles(manifest_path: &Path) -> Result<Vec<SatTile>> {
    let file = std::fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let reader = BufReader::new(file);
    let mut tiles = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tile: SatTile = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: manifest_path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !is_valid_fips(&tile.county_fips) {
            return Err(Error::Record {
                path: manifest_path.to_path_buf(),
                line: idx + 1,
                message: format!("malformed county_fips {:?}", tile.county_fips),
            });
        }
        if !seen.insert(tile.tile_id.clone()) {
            return Err(Error::DuplicateTileId(tile.tile_id));
        }
        tiles.push(tile);
    }
    Ok(tiles)
}

pub fn save_tiles(path: &Path, tiles: &[SatTile]) -> Result<()> {
    write_jsonl(path, tiles)
}

/// Load county SVI records from a CSV with header `FIPS,RPL_THEMES[,THEME_*]`.
pub fn load_svi(csv_path: &Path) -> Result<BTreeMap<String, SviRecord>> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Csv {
        path: csv_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: csv_path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    let mut fips_col = None;
    let mut overall_col = None;
    let mut theme_cols: Vec<(usize, String)> = Vec::new();
    for (i, name) in headers.iter().enumerate() {
        match name {
            "FIPS" => fips_col = Some(i),
            "RPL_THEMES" => overall_col = Some(i),
            other => {
                if let Some(theme) = other.strip_prefix("THEME_") {
                    let theme = theme.to_lowercase();
                    if !SVI_THEMES.contains(&theme.as_str()) {
                        return Err(Error::Validation(format!(
                            "unknown SVI theme column {other:?}"
                        )));
                    }
                    theme_cols.push((i, theme));
                }
            }
        }
    }
    let (fips_col, overall_col) = match (fips_col, overall_col) {
        (Some(f), Some(o)) => (f, o),
        _ => {
            return Err(Error::Csv {
                path: csv_path.to_path_buf(),
                message: "header must contain FIPS and RPL_THEMES".into(),
            })
        }
    };

    let mut map = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Csv {
            path: csv_path.to_path_buf(),
            message: e.to_string(),
        })?;
        let fips = row.get(fips_col).unwrap_or("").to_string();
        let overall: f64 = row
            .get(overall_col)
            .unwrap_or("")
            .parse()
            .map_err(|_| Error::Validation(format!("unparseable RPL_THEMES for {fips:?}")))?;
        let mut themes = BTreeMap::new();
        for (col, name) in &theme_cols {
            if let Some(raw) = row.get(*col) {
                if !raw.is_empty() {
                    let score: f64 = raw.parse().map_err(|_| {
                        Error::Validation(format!("unparseable {name} for {fips:?}"))
                    })?;
                    themes.insert(name.clone(), score);
                }
            }
        }
        let record = SviRecord {
            county_fips: fips.clone(),
            svi_overall: overall,
            theme_scores: if themes.is_empty() { None } else { Some(themes) },
        };
        record.validate()?;
        map.insert(fips, record);
    }
    Ok(map)
}

pub fn save_svi(path: &Path, svi: &BTreeMap<String, SviRecord>) -> Result<()> {
    let mut out = String::new();
    out.push_str("FIPS,RPL_THEMES");
    for theme in SVI_THEMES {
        out.push_str(",THEME_");
        out.push_str(&theme.to_uppercase());
    }
    out.push('\n');
    for record in svi.values() {
        out.push_str(&record.county_fips);
        out.push(',');
        out.push_str(&format_score(record.svi_overall));
        for theme in SVI_THEMES {
            out.push(',');
            if let Some(score) = record.theme_scores.as_ref().and_then(|m| m.get(theme)) {
                out.push_str(&format_score(*score));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn format_score(v: f64) -> String {
    // Shortest round-trip representation keeps the CSV byte-stable.
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') {
        s.push_str(".0");
    }
    s
}

/// Serialize any list of records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::json(path, e))?;
        file.write_all(line.as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}

/// Write a world to `{tiles.jsonl, svi.csv, captions.jsonl, config.json}`.
pub fn save_world(dir: &Path, config: &SyntheticWorldConfig, world: &World) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_tiles(&dir.join("tiles.jsonl"), &world.tiles)?;
    save_svi(&dir.join("svi.csv"), &world.svi)?;
    write_jsonl(&dir.join("captions.jsonl"), &world.captions)?;
    let mut full = config.clone();
    full.svi_link_weights = config.link_weights();
    let json = serde_json::to_string_pretty(&full).map_err(|e| Error::json(dir, e))?;
    std::fs::write(dir.join("config.json"), json + "\n")
        .map_err(|e| Error::io(dir.join("config.json"), e))
}
