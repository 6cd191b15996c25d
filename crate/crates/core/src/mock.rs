//! Deterministic offline stand-ins for the captioner, LLM and video decoder,
//! plus a synthetic image generator. Outputs depend only on their inputs.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgba, RgbaImage};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::caption::Captioner;
use crate::clients::ClientError;
use crate::ingest::media::{FrameError, FrameExtractor};
use crate::instruct::LlmClient;

/// Deterministic byte stream from a label.
struct Stream {
    seed: Vec<u8>,
    counter: u64,
    buf: Vec<u8>,
}

impl Stream {
    fn new(label: &str) -> Self {
        Self { seed: label.as_bytes().to_vec(), counter: 0, buf: Vec::new() }
    }

    fn byte(&mut self) -> u8 {
        if self.buf.is_empty() {
            let mut h = Sha256::new();
            h.update(&self.seed);
            h.update(self.counter.to_le_bytes());
            self.counter += 1;
            self.buf = h.finalize().to_vec();
        }
        self.buf.pop().expect("refilled")
    }

    fn below(&mut self, n: usize) -> usize {
        let v = u32::from_le_bytes([self.byte(), self.byte(), self.byte(), self.byte()]);
        v as usize % n.max(1)
    }
}

/// An image of 8x8 random gray-level blocks tinted by the label, so distinct
/// labels give unrelated dHashes.
pub fn synthetic_image(label: &str, width: u32, height: u32) -> RgbaImage {
    let mut s = Stream::new(label);
    let blocks: Vec<u8> = (0..64).map(|_| s.byte()).collect();
    let tint = [s.byte() / 4, s.byte() / 4, s.byte() / 4];
    RgbaImage::from_fn(width, height, |x, y| {
        let bx = (x as u64 * 8 / width as u64) as usize;
        let by = (y as u64 * 8 / height as u64) as usize;
        let v = blocks[by * 8 + bx] as u16;
        let c = |t: u8| (v * 3 / 4 + t as u16).min(255) as u8;
        Rgba([c(tint[0]), c(tint[1]), c(tint[2]), 255])
    })
}

const SUBJECTS: &[&str] =
    &["a fish", "a small reef fish", "a marine animal", "an underwater scene", "a sea creature", "a colorful fish"];
const DETAILS: &[&str] = &[
    "swimming near a coral reef",
    "over a sandy sea floor",
    "with bright stripes along its body",
    "in clear blue water",
    "among swaying sea grass",
    "close to a rocky outcrop",
    "with sunlight filtering from the surface",
    "next to a large sea anemone",
    "in a dim cave entrance",
    "with small bubbles rising nearby",
];

/// Returns `n` captions built from a fixed phrase list. Roughly one in three
/// records gets a reworded copy of its first caption, which a similarity
/// filter should drop.
#[derive(Debug, Clone, Default)]
pub struct MockCaptioner;

impl Captioner for MockCaptioner {
    fn sample_captions(&self, record_id: &str, _image_ref: &str, n: usize) -> Result<Vec<String>, ClientError> {
        let mut s = Stream::new(record_id);
        let mut out: Vec<String> = Vec::with_capacity(n);
        for i in 0..n {
            if i == 1 && s.below(3) == 0 {
                let first = out[0].split(' ').rev().collect::<Vec<_>>().join(" ");
                out.push(first);
                continue;
            }
            let subject = SUBJECTS[s.below(SUBJECTS.len())];
            let mut text = subject.to_string();
            for _ in 0..=s.below(3) {
                text.push(' ');
                text.push_str(DETAILS[s.below(DETAILS.len())]);
            }
            out.push(text);
        }
        Ok(out)
    }
}

/// Answers from the facts in the prompt, naming the organism.
#[derive(Debug, Clone, Default)]
pub struct MockLlm;

impl LlmClient for MockLlm {
    fn complete(&self, _system: &str, user: &str) -> Result<String, ClientError> {
        let name =
            user.lines().find_map(|l| l.strip_prefix("Organism: ")).unwrap_or("this organism").trim().to_string();
        let facts: Vec<&str> = user
            .lines()
            .filter_map(|l| l.strip_prefix("- "))
            .filter_map(|l| l.split_once(": ").map(|(_, t)| t))
            .collect();
        let mut answer = format!("Here is what is known about {name} from reliable reference sources.");
        for f in facts.iter().take(4) {
            answer.push(' ');
            answer.push_str(f.trim().trim_end_matches('.'));
            answer.push('.');
        }
        if facts.is_empty() {
            answer.push_str(" Little more is recorded about it in the available references.");
        }
        Ok(answer)
    }
}

#[derive(Debug, Deserialize)]
struct VideoDescriptor {
    duration: f64,
    #[serde(default = "default_side")]
    width: u32,
    #[serde(default = "default_side")]
    height: u32,
    label: Option<String>,
}

fn default_side() -> u32 {
    128
}

/// Reads a JSON descriptor (`{"duration": 95.0, "width": 160, "height":
/// 120, "label": "clip-a"}`) in place of a video file and renders one
/// synthetic frame per timestamp. The label defaults to the file name.
#[derive(Debug, Clone, Default)]
pub struct MockFrameExtractor;

impl MockFrameExtractor {
    fn descriptor(video: &Path) -> Result<(VideoDescriptor, String), FrameError> {
        let fail = |m: String| FrameError::Tool { path: video.display().to_string(), message: m };
        let text = fs::read_to_string(video).map_err(|e| fail(e.to_string()))?;
        let d: VideoDescriptor = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
        let label = d
            .label
            .clone()
            .unwrap_or_else(|| video.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        Ok((d, label))
    }
}

impl FrameExtractor for MockFrameExtractor {
    fn duration(&self, video: &Path) -> Result<f64, FrameError> {
        Self::descriptor(video).map(|(d, _)| d.duration)
    }

    fn extract(&self, video: &Path, timestamps: &[f64]) -> Result<Vec<RgbaImage>, FrameError> {
        let (d, label) = Self::descriptor(video)?;
        Ok(timestamps.iter().map(|t| synthetic_image(&format!("{label}@{t:.3}"), d.width, d.height)).collect())
    }
}

const DEMO_TAXA: &str = "\
Amphiprion ocellaris\tclown anemonefish;false percula clownfish\tfamily:Pomacentridae;genus:Amphiprion
Arothron nigropunctatus\tblackspotted puffer\tfamily:Tetraodontidae;genus:Arothron
Zebrasoma flavescens\tyellow tang\tfamily:Acanthuridae;genus:Zebrasoma
";

const DEMO_FACTS: &str = "\
amphiprion ocellaris\tsize>maximum length\tGrows to about 11 cm in length\tdemo
amphiprion ocellaris\tcolor>body coloration\tOrange body crossed by three white bars edged in thin black lines\tdemo
amphiprion ocellaris\thabitat>depth range\tFound from the surface down to roughly 15 m\tdemo
amphiprion ocellaris\tfeeding diet>primary prey\tFeeds on zooplankton and algae near its host anemone\tdemo
amphiprion ocellaris\tdistribution>geographic range\tEastern Indian Ocean and western Pacific\tdemo
amphiprion ocellaris\treproduction>spawning\tLays eggs on rock next to the anemone and the male guards them\tdemo
arothron nigropunctatus\tsize>maximum length\tReaches around 33 cm\tdemo
arothron nigropunctatus\tcolor>body coloration\tGrey to brown body scattered with small black spots\tdemo
arothron nigropunctatus\thabitat>depth range\tLives on lagoon and seaward reefs to about 25 m\tdemo
arothron nigropunctatus\tfeeding diet>primary prey\tBrowses on coral tips, sponges and small invertebrates\tdemo
arothron nigropunctatus\tdistribution>geographic range\tIndo-West Pacific from East Africa to Samoa\tdemo
arothron nigropunctatus\tmorphology>body plan\tInflates its body with water when threatened\tdemo
zebrasoma flavescens\tsize>maximum length\tGrows to about 20 cm\tdemo
zebrasoma flavescens\tcolor>body coloration\tBright yellow over the whole disc-shaped body\tdemo
zebrasoma flavescens\thabitat>depth range\tCommon on reef flats between 2 and 46 m\tdemo
zebrasoma flavescens\tfeeding diet>primary prey\tGrazes filamentous algae from rock and coral\tdemo
zebrasoma flavescens\tdistribution>geographic range\tPacific Ocean, most abundant around Hawaii\tdemo
zebrasoma flavescens\tmorphology>spines and venom apparatus\tCarries a sharp white spine at the base of the tail\tdemo
";

/// Scientific names of the demo taxa.
pub const DEMO_TAXON_NAMES: [&str; 3] = ["Amphiprion ocellaris", "Arothron nigropunctatus", "Zebrasoma flavescens"];

const DEMO_CUES: &[&str] = &[
    "A clownfish darts between the tentacles of its host anemone.",
    "Two anemonefish hover over the anemone as the current shifts.",
    "The smaller fish returns to shelter near the anemone base.",
    "An orange and white clownfish faces the camera.",
    "The pair patrols the edge of the anemone colony.",
    "A clownfish nips at the tentacles to clean them.",
];

const DUMP_TEXTS: &[&str] =
    &["reef fish photographed on a night dive", "survey frame from transect B", "fish near coral bommie", ""];

/// Counts of the demo corpus by input.
pub const DEMO_DUMP_IMAGES: usize = 170;
pub const DEMO_WEB_IMAGES: usize = 14;
pub const DEMO_SUBTITLED_SECS: f64 = 60.0;
pub const DEMO_PLAIN_SECS: f64 = 95.0;
/// Dump images that are slightly altered copies of earlier dump images.
pub const DEMO_PLANTED_DUPLICATES: usize = 5;

/// Paths of a generated demo corpus.
#[derive(Debug, Clone)]
pub struct DemoCorpus {
    pub dump: PathBuf,
    pub taxa: PathBuf,
    pub facts: PathBuf,
    pub subtitled_video: PathBuf,
    pub subtitles: PathBuf,
    pub plain_video: PathBuf,
    /// Directory to serve over HTTP; the page is `index.html`.
    pub site: PathBuf,
}

fn write_png(path: &Path, img: &RgbaImage) -> std::io::Result<()> {
    img.save_with_format(path, ImageFormat::Png).map_err(std::io::Error::other)
}

/// Writes a small mixed corpus: a dump of annotated and unannotated images,
/// one subtitled and one plain video descriptor (for [`MockFrameExtractor`]),
/// a web page with captioned images, and a three-taxon knowledge base.
/// Together they yield 200 images.
pub fn write_demo_corpus(dir: &Path) -> std::io::Result<DemoCorpus> {
    let images = dir.join("dump");
    let site = dir.join("site");
    fs::create_dir_all(&images)?;
    fs::create_dir_all(site.join("img"))?;

    let mut dump = String::from("# image\tcategory\ttext\n");
    let originals = DEMO_DUMP_IMAGES - DEMO_PLANTED_DUPLICATES;
    for i in 0..DEMO_DUMP_IMAGES {
        let name = format!("img-{i:03}.png");
        let img = if i < originals {
            synthetic_image(&format!("dump-{i}"), 96, 96)
        } else {
            // Nudge a few pixels of an earlier image: new bytes, same look.
            let mut img = synthetic_image(&format!("dump-{}", (i - originals) * 7), 96, 96);
            for k in 0..4 {
                let px = img.get_pixel_mut(10 + k * 3, 20);
                px.0[0] = px.0[0].wrapping_add(3);
            }
            img
        };
        write_png(&images.join(&name), &img)?;
        let category = if i % 5 < 3 { DEMO_TAXON_NAMES[i % 3] } else { "" };
        let text = DUMP_TEXTS[i % DUMP_TEXTS.len()];
        dump.push_str(&format!("dump/{name}\t{category}\t{text}\n").replace("\t\t\n", "\n").replace("\t\n", "\n"));
    }
    let dump_path = dir.join("dump.tsv");
    fs::write(&dump_path, dump)?;

    let mut html = String::from("<!DOCTYPE html>\n<html><head><title>Reef gallery</title></head><body>\n");
    for i in 0..DEMO_WEB_IMAGES {
        let name = format!("web-{i:02}.png");
        write_png(&site.join("img").join(&name), &synthetic_image(&format!("web-{i}"), 120, 90))?;
        if i % 2 == 0 {
            html.push_str(&format!(
                "<figure><img src=\"img/{name}\"><figcaption>Clown anemonefish sheltering in its anemone, plate {i}</figcaption></figure>\n"
            ));
        } else {
            html.push_str(&format!("<div><img src=\"img/{name}\" alt=\"Anemonefish close-up number {i}\"></div>\n"));
        }
    }
    html.push_str("</body></html>\n");
    fs::write(site.join("index.html"), html)?;

    let subtitled_video = dir.join("anemone-dive.json");
    fs::write(&subtitled_video, format!(r#"{{"duration": {DEMO_SUBTITLED_SECS}, "width": 160, "height": 120}}"#))?;
    let mut srt = String::new();
    for (i, cue) in DEMO_CUES.iter().enumerate() {
        let start = i as u64 * 10;
        srt.push_str(&format!("{}\n00:00:{start:02},000 --> 00:00:{:02},000\n{cue}\n\n", i + 1, start + 6));
    }
    let subtitles = dir.join("anemone-dive.srt");
    fs::write(&subtitles, srt)?;
    let plain_video = dir.join("reef-drift.json");
    fs::write(&plain_video, format!(r#"{{"duration": {DEMO_PLAIN_SECS}, "width": 160, "height": 120}}"#))?;

    let taxa = dir.join("taxa.tsv");
    fs::write(&taxa, DEMO_TAXA)?;
    let facts = dir.join("facts.tsv");
    fs::write(&facts, DEMO_FACTS)?;
    Ok(DemoCorpus { dump: dump_path, taxa, facts, subtitled_video, subtitles, plain_video, site })
}
