//! The five-tier prompt set and the remote captioning client.
//!
//! Templates live in versioned data files. Tier 1 asks for a visual summary,
//! tier 2 for structured objective features (the template the regression
//! path consumes), tier 3 for neighborhood context, tier 4 for geographic
//! and socioeconomic reasoning, tier 5 for interpretive summaries.

use serde::{Deserialize, Serialize};

use crate::corpus::SatTile;
use crate::error::{Error, Result};
use crate::grammar::StructuredAttributes;
use crate::provider::{http_client, post_json_with_retry, run_bounded, FixtureStore, ProviderConfig};

const TIER_TEMPLATES: [&str; 5] = [
    include_str!("../data/prompts/tier1.txt"),
    include_str!("../data/prompts/tier2.txt"),
    include_str!("../data/prompts/tier3.txt"),
    include_str!("../data/prompts/tier4.txt"),
    include_str!("../data/prompts/tier5.txt"),
];

/// One prompt tier: the template text plus, for the structured tiers, the
/// attribute categories the template asks about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub tier: u8,
    pub template_text: String,
    pub attribute_targets: Vec<String>,
}

/// The canonical template for a tier (1..=5).
pub fn build_prompt(tier: u8) -> Result<PromptSpec> {
    if !(1..=5).contains(&tier) {
        return Err(Error::InvalidArgument(format!(
            "tier must be in 1..=5, got {tier}"
        )));
    }
    let attribute_targets = match tier {
        2 => vec![
            "roof_type",
            "roof_condition",
            "house_size",
            "environment",
            "yard",
            "road",
        ],
        3 => vec!["environment", "yard", "road"],
        _ => vec![],
    };
    Ok(PromptSpec {
        tier,
        template_text: TIER_TEMPLATES[tier as usize - 1].trim_end().to_string(),
        attribute_targets: attribute_targets.into_iter().map(String::from).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    RemoteLlm,
    ToyCaptioner,
    Fixture,
    Grammar,
}

/// A tier-tagged caption for one tile; `attributes` is filled by the parse
/// stage (all-unknown until then).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub tile_id: String,
    pub tier: u8,
    pub source: CaptionSource,
    pub text: String,
    #[serde(default)]
    pub attributes: StructuredAttributes,
    #[serde(default)]
    pub truncated: bool,
}

/// A per-tile captioning failure; successes elsewhere in the batch survive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileFailure {
    pub tile_id: String,
    pub message: String,
}

pub type TileOutcome = std::result::Result<CaptionRecord, TileFailure>;

#[derive(Debug, Serialize)]
struct CaptionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    image_uri: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CaptionResponse {
    #[serde(default)]
    tile_id: Option<String>,
    caption: String,
}

fn record_from_response(
    tile: &SatTile,
    prompt: &PromptSpec,
    resp: &CaptionResponse,
    source: CaptionSource,
) -> TileOutcome {
    if let Some(got) = &resp.tile_id {
        if got != &tile.tile_id {
            return Err(TileFailure {
                tile_id: tile.tile_id.clone(),
                message: format!("response tile_id {got:?} does not match request"),
            });
        }
    }
    if resp.caption.trim().is_empty() {
        return Err(TileFailure {
            tile_id: tile.tile_id.clone(),
            message: "provider returned an empty caption".into(),
        });
    }
    Ok(CaptionRecord {
        tile_id: tile.tile_id.clone(),
        tier: prompt.tier,
        source,
        text: resp.caption.clone(),
        attributes: StructuredAttributes::default(),
        truncated: false,
    })
}

/// Request one caption per tile from the remote provider, with fixture
/// playback and record-on-first-use when `fixture_dir` is set. Issues at most
/// `max_parallel` concurrent requests; output order is input order.
pub fn request_captions(
    tiles: &[SatTile],
    prompt: &PromptSpec,
    cfg: &ProviderConfig,
) -> Result<Vec<TileOutcome>> {
    cfg.validate()?;
    let store = match &cfg.fixture_dir {
        Some(dir) => Some(FixtureStore::open(dir)?),
        None => None,
    };
    let client = http_client();
    let auth = cfg.auth_token();

    let job = |i: usize| -> TileOutcome {
        let tile = &tiles[i];
        let key = FixtureStore::key(&[&tile.tile_id, &prompt.template_text]);
        if let Some(store) = &store {
            match store.get::<CaptionResponse>(&key) {
                Ok(Some(resp)) => {
                    return record_from_response(tile, prompt, &resp, CaptionSource::Fixture)
                }
                Ok(None) => {}
                Err(e) => {
                    return Err(TileFailure {
                        tile_id: tile.tile_id.clone(),
                        message: format!("fixture read failed: {e}"),
                    })
                }
            }
        }
        let body = CaptionRequest {
            model: &cfg.model,
            prompt: &prompt.template_text,
            image_uri: tile
                .image_uri
                .clone()
                .unwrap_or_else(|| format!("synthetic://{}", tile.tile_id)),
        };
        let resp: CaptionResponse =
            match post_json_with_retry(&client, &cfg.endpoint, auth.as_deref(), &body, &cfg.retry)
            {
                Ok(resp) => resp,
                Err(message) => {
                    return Err(TileFailure {
                        tile_id: tile.tile_id.clone(),
                        message,
                    })
                }
            };
        let outcome = record_from_response(tile, prompt, &resp, CaptionSource::RemoteLlm);
        if outcome.is_ok() {
            if let Some(store) = &store {
                if let Err(e) = store.put(&key, &resp) {
                    return Err(TileFailure {
                        tile_id: tile.tile_id.clone(),
                        message: format!("fixture write failed: {e}"),
                    });
                }
            }
        }
        outcome
    };

    Ok(run_bounded(tiles.len(), cfg.max_parallel, job))
}
