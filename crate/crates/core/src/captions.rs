//! Natural-language descriptors for spatial attributes, templated spatial
//! captions, rephrasing prompts and zero-shot probe captions.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::roomsim::SpatialAttributes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Near,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Front,
    Back,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Elevation {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoomSize {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reverb {
    HighlyReverberant,
    AcousticallyDampened,
}

impl Distance {
    pub const ALL: [Distance; 2] = [Distance::Near, Distance::Far];

    pub fn word(self) -> &'static str {
        match self {
            Distance::Near => "near",
            Distance::Far => "far",
        }
    }
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Front, Direction::Back];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Front => "front",
            Direction::Back => "back",
        }
    }
}

impl Elevation {
    pub const ALL: [Elevation; 2] = [Elevation::Up, Elevation::Down];

    pub fn word(self) -> &'static str {
        match self {
            Elevation::Up => "up",
            Elevation::Down => "down",
        }
    }
}

impl RoomSize {
    pub const ALL: [RoomSize; 3] = [RoomSize::Small, RoomSize::Medium, RoomSize::Large];

    pub fn word(self) -> &'static str {
        match self {
            RoomSize::Small => "small",
            RoomSize::Medium => "medium",
            RoomSize::Large => "large",
        }
    }
}

impl Reverb {
    pub const ALL: [Reverb; 2] = [Reverb::HighlyReverberant, Reverb::AcousticallyDampened];

    pub fn word(self) -> &'static str {
        match self {
            Reverb::HighlyReverberant => "highly reverberant",
            Reverb::AcousticallyDampened => "acoustically dampened",
        }
    }
}

/// Descriptors of one clip; each is present only inside its band, except room
/// size which is always set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub distance: Option<Distance>,
    pub direction: Option<Direction>,
    pub elevation: Option<Elevation>,
    pub room_size: RoomSize,
    pub reverb: Option<Reverb>,
}

impl DescriptorSet {
    pub fn medium_room() -> Self {
        Self { distance: None, direction: None, elevation: None, room_size: RoomSize::Medium, reverb: None }
    }

    fn position_words(&self) -> Vec<&'static str> {
        [
            self.distance.map(Distance::word),
            self.elevation.map(Elevation::word),
            self.direction.map(Direction::word),
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    fn room_phrase(&self) -> String {
        match self.reverb {
            Some(r) => format!("a {} {} room", self.room_size.word(), r.word()),
            None => format!("a {} room", self.room_size.word()),
        }
    }

    /// Every descriptor word present, in slot order.
    pub fn words(&self) -> Vec<&'static str> {
        let mut w = self.position_words();
        w.push(self.room_size.word());
        w.extend(self.reverb.map(Reverb::word));
        w
    }
}

/// Maps numeric attributes onto descriptor bands. Azimuth is positive to the
/// right; the rear wedge is `|azimuth| >= 145` degrees.
pub fn attrs_to_descriptors(a: &SpatialAttributes) -> DescriptorSet {
    let distance = if a.distance_m < 1.0 {
        Some(Distance::Near)
    } else if a.distance_m > 2.0 {
        Some(Distance::Far)
    } else {
        None
    };
    let az = a.azimuth_deg;
    let direction = if (-125.0..=-55.0).contains(&az) {
        Some(Direction::Left)
    } else if (55.0..=125.0).contains(&az) {
        Some(Direction::Right)
    } else if (-35.0..=35.0).contains(&az) {
        Some(Direction::Front)
    } else if az.abs() >= 145.0 {
        Some(Direction::Back)
    } else {
        None
    };
    let elevation = if a.elevation_deg > 40.0 {
        Some(Elevation::Up)
    } else if a.elevation_deg < -40.0 {
        Some(Elevation::Down)
    } else {
        None
    };
    let room_size = if a.floor_area_m2 < 50.0 {
        RoomSize::Small
    } else if a.floor_area_m2 > 100.0 {
        RoomSize::Large
    } else {
        RoomSize::Medium
    };
    let reverb = if a.t30_ms > 1000.0 {
        Some(Reverb::HighlyReverberant)
    } else if a.t30_ms < 200.0 {
        Some(Reverb::AcousticallyDampened)
    } else {
        None
    };
    DescriptorSet { distance, direction, elevation, room_size, reverb }
}

/// Number of caption templates.
pub const TEMPLATE_COUNT: usize = 8;

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Lower-cases a leading article-like first word and strips final punctuation
/// so a caption can be embedded mid-sentence.
fn embeddable(caption: &str) -> String {
    let trimmed = caption.trim().trim_end_matches(['.', '!', '?']).trim_end();
    let mut chars = trimmed.chars();
    match (chars.next(), chars.next()) {
        (Some(a), Some(b)) if a.is_uppercase() && !b.is_uppercase() => {
            a.to_lowercase().chain(std::iter::once(b)).chain(chars).collect()
        }
        _ => trimmed.to_string(),
    }
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Realises a spatial caption from one of [`TEMPLATE_COUNT`] templates chosen
/// by `seed`. Seed 0 uses the plain "The sound of ... is coming from ..." form.
pub fn build_spatial_caption(caption: &str, d: &DescriptorSet, seed: u64) -> Result<String> {
    let c = embeddable(caption);
    if c.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let pos = d.position_words();
    let p = (!pos.is_empty()).then(|| format!("the {}", pos.join(" ")));
    let r = d.room_phrase();
    let s = match (seed % TEMPLATE_COUNT as u64, p) {
        (0, Some(p)) => format!("The sound of {c} is coming from {p} of {r}."),
        (0, None) => format!("The sound of {c} is coming from {r}."),
        (1, Some(p)) => format!("{} can be heard from {p} of {r}.", capitalize(&c)),
        (1, None) => format!("{} can be heard in {r}.", capitalize(&c)),
        (2, Some(p)) => format!("In {r}, {c} is heard from {p}."),
        (2, None) => format!("In {r}, {c} is heard."),
        (3, Some(p)) => format!("{}, coming from {p} of {r}.", capitalize(&c)),
        (3, None) => format!("{}, inside {r}.", capitalize(&c)),
        (4, Some(p)) => format!("From {p} of {r} comes the sound of {c}."),
        (4, None) => format!("From within {r} comes the sound of {c}."),
        (5, Some(p)) => format!("There is {c} at {p} of {r}."),
        (5, None) => format!("There is {c} in {r}."),
        (6, Some(p)) => format!("Listen to {c} from {p} of {r}."),
        (6, None) => format!("Listen to {c} in {r}."),
        (_, Some(p)) => format!("{} carries the sound of {c} from {p}.", capitalize(&r)),
        (_, None) => format!("{} carries the sound of {c}.", capitalize(&r)),
    };
    Ok(normalize_whitespace(&s))
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn descriptors_from_tokens(toks: &[String], spatial_caption: &str) -> Result<DescriptorSet> {
    let has = |w: &str| toks.iter().any(|t| t == w);
    let pair = |a: &str, b: &str| toks.windows(2).any(|w| w[0] == a && w[1] == b);
    let pick = |opts: &[(&str, usize)]| opts.iter().find(|(w, _)| has(w)).map(|&(_, i)| i);

    let distance = pick(&[("near", 0), ("far", 1)]).map(|i| Distance::ALL[i]);
    let direction = pick(&[("left", 0), ("right", 1), ("front", 2), ("back", 3)]).map(|i| Direction::ALL[i]);
    let elevation = pick(&[("up", 0), ("down", 1)]).map(|i| Elevation::ALL[i]);
    let room_size = pick(&[("small", 0), ("medium", 1), ("large", 2)])
        .map(|i| RoomSize::ALL[i])
        .ok_or_else(|| Error::Malformed(format!("no room size in {spatial_caption:?}")))?;
    let reverb = if pair("highly", "reverberant") {
        Some(Reverb::HighlyReverberant)
    } else if pair("acoustically", "dampened") {
        Some(Reverb::AcousticallyDampened)
    } else {
        None
    };
    Ok(DescriptorSet { distance, direction, elevation, room_size, reverb })
}

/// Recovers the descriptors from a templated caption. The original caption's
/// tokens are removed first so its own words are not mistaken for
/// descriptors. When the original occurs more than once, the occurrence whose
/// reading rebuilds the caption exactly wins; otherwise the first one is used.
pub fn parse_descriptors(spatial_caption: &str, original_caption: &str) -> Result<DescriptorSet> {
    let all = tokens(spatial_caption);
    let orig = tokens(&embeddable(original_caption));
    if orig.is_empty() {
        return descriptors_from_tokens(&all, spatial_caption);
    }
    let starts: Vec<usize> = (0..all.len().saturating_sub(orig.len() - 1)).filter(|&i| all[i..i + orig.len()] == orig[..]).collect();
    let without = |i: usize| [&all[..i], &all[i + orig.len()..]].concat();
    for &i in &starts {
        if let Ok(d) = descriptors_from_tokens(&without(i), spatial_caption) {
            if (0..TEMPLATE_COUNT as u64).any(|seed| build_spatial_caption(original_caption, &d, seed).is_ok_and(|c| c == spatial_caption)) {
                return Ok(d);
            }
        }
    }
    match starts.first() {
        Some(&i) => descriptors_from_tokens(&without(i), spatial_caption),
        None => descriptors_from_tokens(&all, spatial_caption),
    }
}

/// Instruction appended to every rephrasing prompt.
pub const REPHRASE_INSTRUCTION: &str =
    "Rephrase as a short English sentence describing the sound and all the details of its source.";

/// Prompt for an external language model to rephrase the caption.
pub fn build_llm_prompt(caption: &str, d: &DescriptorSet) -> Result<String> {
    let caption = caption.trim();
    if caption.is_empty() {
        return Err(Error::EmptyCaption);
    }
    let pos = d.position_words();
    let size_reverb = [Some(d.room_size.word()), d.reverb.map(Reverb::word)]
        .into_iter()
        .flatten()
        .collect::<Vec<_>>()
        .join(" ");
    let prompt = if pos.is_empty() {
        format!("The sound: {caption} is coming from a {size_reverb} room. {REPHRASE_INSTRUCTION}")
    } else {
        format!(
            "The sound: {caption} is coming from the {} of a {size_reverb} room. {REPHRASE_INSTRUCTION}",
            pos.join(" ")
        )
    };
    Ok(normalize_whitespace(&prompt))
}

/// The five attribute families used for probing and classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Distance,
    Direction,
    Elevation,
    RoomSize,
    Reverb,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 5] = [
        AttributeKind::Distance,
        AttributeKind::Direction,
        AttributeKind::Elevation,
        AttributeKind::RoomSize,
        AttributeKind::Reverb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeKind::Distance => "distance",
            AttributeKind::Direction => "direction",
            AttributeKind::Elevation => "elevation",
            AttributeKind::RoomSize => "room_size",
            AttributeKind::Reverb => "reverb",
        }
    }

    /// Class labels of this family.
    pub fn classes(self) -> Vec<&'static str> {
        match self {
            AttributeKind::Distance => Distance::ALL.iter().map(|d| d.word()).collect(),
            AttributeKind::Direction => Direction::ALL.iter().map(|d| d.word()).collect(),
            AttributeKind::Elevation => Elevation::ALL.iter().map(|d| d.word()).collect(),
            AttributeKind::RoomSize => RoomSize::ALL.iter().map(|d| d.word()).collect(),
            AttributeKind::Reverb => Reverb::ALL.iter().map(|d| d.word()).collect(),
        }
    }

    /// The class a descriptor set belongs to, if any.
    pub fn label_of(self, d: &DescriptorSet) -> Option<&'static str> {
        match self {
            AttributeKind::Distance => d.distance.map(Distance::word),
            AttributeKind::Direction => d.direction.map(Direction::word),
            AttributeKind::Elevation => d.elevation.map(Elevation::word),
            AttributeKind::RoomSize => Some(d.room_size.word()),
            AttributeKind::Reverb => d.reverb.map(Reverb::word),
        }
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AttributeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttributeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

/// Phrase substituted into the probe template for a class label. Positional
/// labels reuse the caption wording ("the near", "the up") so a bag-of-words
/// text encoder has seen every probe token during training.
pub fn probe_phrase(label: &str) -> Result<&'static str> {
    Ok(match label {
        "near" => "the near",
        "far" => "the far",
        "left" => "the left",
        "right" => "the right",
        "front" => "the front",
        "back" => "the back",
        "up" => "the up",
        "down" => "the down",
        "small" => "a small room",
        "medium" => "a medium room",
        "large" => "a large room",
        "highly reverberant" => "a highly reverberant room",
        "acoustically dampened" => "an acoustically dampened room",
        other => return Err(Error::UnknownLabel(other.to_string())),
    })
}

/// Zero-shot probe caption "A sound coming from <phrase>".
pub fn probe_caption(label: &str) -> Result<String> {
    Ok(format!("A sound coming from {}", probe_phrase(label)?))
}

/// A captioned clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub original_caption: String,
    pub spatial_caption: String,
    pub descriptors: DescriptorSet,
    pub attributes: SpatialAttributes,
}

impl CaptionRecord {
    pub fn new(original_caption: &str, attributes: SpatialAttributes, seed: u64) -> Result<Self> {
        let descriptors = attrs_to_descriptors(&attributes);
        Ok(Self {
            original_caption: original_caption.to_string(),
            spatial_caption: build_spatial_caption(original_caption, &descriptors, seed)?,
            descriptors,
            attributes,
        })
    }
}

/// HTTP endpoint of an external rephrasing model.
#[derive(Debug, Clone, PartialEq)]
pub struct RephraserEndpoint {
    pub url: String,
    pub timeout: Duration,
    pub retries: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl RephraserEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into(), timeout: Duration::from_secs(30), retries: 1, temperature: 0.9, max_tokens: 1024 }
    }
}

#[derive(Serialize)]
struct RephraseRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct RephraseReply {
    text: String,
}

/// Result of a rephrasing request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rephrased {
    pub text: String,
    pub used_fallback: bool,
}

fn post_prompt(prompt: &str, ep: &RephraserEndpoint) -> Result<String> {
    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(ep.timeout)).build().into();
    let body = RephraseRequest { prompt, temperature: ep.temperature, max_tokens: ep.max_tokens };
    let mut resp = agent.post(&ep.url).send_json(&body).map_err(|e| Error::Rephraser(e.to_string()))?;
    let reply: RephraseReply = resp.body_mut().read_json().map_err(|e| Error::Rephraser(e.to_string()))?;
    if reply.text.trim().is_empty() {
        return Err(Error::Rephraser("empty completion".into()));
    }
    Ok(reply.text)
}

/// Sends `prompt` to the endpoint and returns the completion verbatim. Any
/// transport or format failure yields `fallback` with `used_fallback` set.
pub fn rephrase_external(prompt: &str, ep: &RephraserEndpoint, fallback: &str) -> Rephrased {
    let mut last = None;
    for _ in 0..=ep.retries {
        match post_prompt(prompt, ep) {
            Ok(text) => return Rephrased { text, used_fallback: false },
            Err(e) => last = Some(e),
        }
    }
    if let Some(e) = last {
        log::warn!("rephraser at {} failed ({e}); using the template caption", ep.url);
    }
    Rephrased { text: fallback.to_string(), used_fallback: true }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn attrs(az: f64, el: f64, dist: f64, area: f64, t30: f64) -> SpatialAttributes {
        SpatialAttributes { azimuth_deg: az, elevation_deg: el, distance_m: dist, floor_area_m2: area, t30_ms: t30 }
    }

    fn all_sets() -> Vec<DescriptorSet> {
        let mut out = Vec::new();
        for distance in [None, Some(Distance::Near), Some(Distance::Far)] {
            for direction in std::iter::once(None).chain(Direction::ALL.map(Some)) {
                for elevation in [None, Some(Elevation::Up), Some(Elevation::Down)] {
                    for room_size in RoomSize::ALL {
                        for reverb in std::iter::once(None).chain(Reverb::ALL.map(Some)) {
                            out.push(DescriptorSet { distance, direction, elevation, room_size, reverb });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn band_examples() {
        assert_eq!(attrs_to_descriptors(&attrs(0.0, 0.0, 0.8, 75.0, 500.0)).distance, Some(Distance::Near));
        let d = attrs_to_descriptors(&attrs(-90.0, 0.0, 1.5, 75.0, 500.0));
        assert_eq!(d, DescriptorSet { direction: Some(Direction::Left), ..DescriptorSet::medium_room() });
        assert_eq!(attrs_to_descriptors(&attrs(0.0, 0.0, 1.5, 75.0, 1500.0)).reverb, Some(Reverb::HighlyReverberant));
        assert_eq!(attrs_to_descriptors(&attrs(45.0, 0.0, 1.5, 75.0, 500.0)).direction, None);
        assert_eq!(attrs_to_descriptors(&attrs(-150.0, 0.0, 1.5, 75.0, 500.0)).direction, Some(Direction::Back));
        assert_eq!(attrs_to_descriptors(&attrs(180.0, 0.0, 1.5, 75.0, 500.0)).direction, Some(Direction::Back));
        assert_eq!(attrs_to_descriptors(&attrs(100.0, 45.0, 3.0, 20.0, 150.0)), DescriptorSet {
            distance: Some(Distance::Far),
            direction: Some(Direction::Right),
            elevation: Some(Elevation::Up),
            room_size: RoomSize::Small,
            reverb: Some(Reverb::AcousticallyDampened),
        });
    }

    #[test]
    fn seed_zero_template() {
        let d = DescriptorSet {
            distance: Some(Distance::Near),
            direction: Some(Direction::Left),
            room_size: RoomSize::Small,
            ..DescriptorSet::medium_room()
        };
        assert_eq!(
            build_spatial_caption("a dog barking", &d, 0).unwrap(),
            "The sound of a dog barking is coming from the near left of a small room."
        );
        assert_eq!(
            build_spatial_caption("a dog barking", &DescriptorSet::medium_room(), 0).unwrap(),
            "The sound of a dog barking is coming from a medium room."
        );
        assert!(build_spatial_caption("  ", &d, 0).is_err());
    }

    #[test]
    fn captions_round_trip_for_every_template() {
        let originals = ["a dog barking", "An electronic beeping.", "Rain on a tin roof"];
        for d in all_sets() {
            for seed in 0..TEMPLATE_COUNT as u64 {
                for o in originals {
                    let c = build_spatial_caption(o, &d, seed).unwrap();
                    assert_eq!(build_spatial_caption(o, &d, seed).unwrap(), c);
                    for w in d.words() {
                        assert!(c.contains(w), "{c:?} lacks {w}");
                    }
                    assert_eq!(parse_descriptors(&c, o).unwrap(), d, "{c}");
                    assert!(!c.contains("  "));
                }
            }
        }
    }

    #[test]
    fn llm_prompt_shapes() {
        let d = DescriptorSet { distance: Some(Distance::Far), ..DescriptorSet::medium_room() };
        let p = build_llm_prompt("A bird is loudly making a lot of noises.", &d).unwrap();
        assert_eq!(
            p,
            "The sound: A bird is loudly making a lot of noises. is coming from the far of a medium room. \
             Rephrase as a short English sentence describing the sound and all the details of its source."
        );
        let full = DescriptorSet {
            distance: Some(Distance::Near),
            direction: Some(Direction::Back),
            elevation: Some(Elevation::Down),
            room_size: RoomSize::Large,
            reverb: Some(Reverb::HighlyReverberant),
        };
        assert!(build_llm_prompt("x", &full)
            .unwrap()
            .contains("is coming from the near down back of a large highly reverberant room."));
        let bare = build_llm_prompt("a cat", &DescriptorSet::medium_room()).unwrap();
        assert!(bare.contains("a cat is coming from a medium room."));
        for d in all_sets() {
            assert!(build_llm_prompt("a cat", &d).unwrap().ends_with(REPHRASE_INSTRUCTION));
        }
    }

    #[test]
    fn originals_made_of_descriptor_words() {
        for original in ["far up left", "e", "a large dog", "Small room"] {
            for d in all_sets() {
                for seed in 0..TEMPLATE_COUNT as u64 {
                    let c = build_spatial_caption(original, &d, seed).unwrap();
                    assert_eq!(parse_descriptors(&c, original).unwrap(), d, "{c}");
                }
            }
        }
    }

    #[test]
    fn probe_captions() {
        assert_eq!(probe_caption("far").unwrap(), "A sound coming from the far");
        assert_eq!(probe_caption("left").unwrap(), "A sound coming from the left");
        assert!(matches!(probe_caption("behind-left"), Err(Error::UnknownLabel(_))));
        let all: Vec<String> = AttributeKind::ALL
            .iter()
            .flat_map(|k| k.classes())
            .map(|c| probe_caption(c).unwrap())
            .collect();
        let unique: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), all.len());
    }

    fn stub_server(reply: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/rephrase", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            String::from_utf8(body).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn rephraser_passes_completion_through() {
        let (url, handle) = stub_server(r#"{"text":"A dog barks close by on the left."}"#);
        let ep = RephraserEndpoint { retries: 0, ..RephraserEndpoint::new(url) };
        let out = rephrase_external("prompt text", &ep, "fallback");
        assert_eq!(out, Rephrased { text: "A dog barks close by on the left.".into(), used_fallback: false });
        let sent: serde_json::Value = serde_json::from_str(&handle.join().unwrap()).unwrap();
        assert_eq!(sent["prompt"], "prompt text");
        assert_eq!(sent["temperature"], 0.9);
        assert_eq!(sent["max_tokens"], 1024);
    }

    #[test]
    fn rephraser_falls_back() {
        // bind then drop to get a port with nothing listening
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let ep = RephraserEndpoint {
            timeout: Duration::from_secs(2),
            ..RephraserEndpoint::new(format!("http://127.0.0.1:{port}/"))
        };
        assert_eq!(rephrase_external("p", &ep, "fallback"), Rephrased { text: "fallback".into(), used_fallback: true });

        let (url, handle) = stub_server(r#"{"completion":"wrong field"}"#);
        let ep = RephraserEndpoint { retries: 0, ..RephraserEndpoint::new(url) };
        assert!(rephrase_external("p", &ep, "fb").used_fallback);
        handle.join().unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn captions_round_trip_from_attributes(
                az in -180.0f64..=180.0,
                el in -90.0f64..=90.0,
                dist in 0.1f64..6.0,
                area in 5.0f64..400.0,
                t30 in 100.0f64..3000.0,
                seed in any::<u64>(),
                original in "[A-Z]?[a-z]{1,8}( [a-z]{1,8}){0,5}[.]?",
            ) {
                let d = attrs_to_descriptors(&attrs(az, el, dist, area, t30));
                let c = build_spatial_caption(&original, &d, seed).unwrap();
                prop_assert_eq!(parse_descriptors(&c, &original).unwrap(), d);
                prop_assert_eq!(build_spatial_caption(&original, &d, seed).unwrap(), c);
            }
        }
    }
}
