//! Prompt-driven slice refinement: the refiner interface, the retry/gate
//! policy, a built-in region-growing refiner and a child-process client for
//! the newline-delimited JSON wire protocol.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::prompts::{make_prompts, PromptSet};

/// Everything a refiner may look at for one slice.
#[derive(Debug, Clone, Copy)]
pub struct RefineRequest<'a> {
    pub image: &'a [f32],
    /// The mask the prompts were drawn from. Not sent over the wire.
    pub initial: &'a [bool],
    pub h: usize,
    pub w: usize,
    pub prompts: &'a PromptSet,
}

/// A refiner's answer for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerReply {
    pub mask: Vec<bool>,
    pub confidence: f64,
}

/// A promptable 2-D segmenter.
pub trait RegionRefiner {
    fn refine(&mut self, request: &RefineRequest<'_>) -> Result<RefinerReply>;
}

/// Acceptance gate and retry budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinePolicy {
    pub confidence_gate: f64,
    pub max_attempts: usize,
}

impl Default for RefinePolicy {
    fn default() -> Self {
        Self {
            confidence_gate: 0.9,
            max_attempts: 3,
        }
    }
}

/// Result of [`refine_slice`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub mask: Vec<bool>,
    /// Confidence of the accepted attempt, or the best rejected one.
    pub confidence: f64,
    /// Number of refiner calls made.
    pub attempts: usize,
    pub accepted: bool,
    /// Set when a call failed and the initial mask was kept.
    pub failed: bool,
}

fn check_reply(reply: &RefinerReply, len: usize) -> Result<()> {
    if reply.mask.len() != len {
        return Err(Error::Refiner(format!(
            "mask has {} pixels, expected {len}",
            reply.mask.len()
        )));
    }
    if !(0.0..=1.0).contains(&reply.confidence) {
        return Err(Error::Refiner(format!(
            "confidence {} outside [0, 1]",
            reply.confidence
        )));
    }
    Ok(())
}

/// Ask `refiner` up to `policy.max_attempts` times, drawing prompts with seeds
/// `seed, seed + 1, …`; the first reply meeting the gate is taken. Otherwise,
/// or as soon as a call fails, the initial mask is returned unaccepted.
pub fn refine_slice(
    image: &[f32],
    initial: &[bool],
    h: usize,
    w: usize,
    refiner: &mut dyn RegionRefiner,
    seed: u64,
    policy: RefinePolicy,
) -> Result<RefineOutcome> {
    if image.len() != h * w || initial.len() != h * w {
        return Err(Error::shape("refine_slice", &[image.len(), initial.len()], &[h, w]));
    }
    let fallback = |confidence, attempts, failed| RefineOutcome {
        mask: initial.to_vec(),
        confidence,
        attempts,
        accepted: false,
        failed,
    };
    let mut best = 0.0f64;
    for attempt in 0..policy.max_attempts {
        let prompts = make_prompts(initial, h, w, seed.wrapping_add(attempt as u64))?;
        let request = RefineRequest {
            image,
            initial,
            h,
            w,
            prompts: &prompts,
        };
        let reply = refiner.refine(&request).and_then(|r| check_reply(&r, h * w).map(|_| r));
        match reply {
            Err(e) => {
                log::warn!("refiner failed on attempt {}: {e}; keeping initial mask", attempt + 1);
                return Ok(fallback(best, attempt + 1, true));
            }
            Ok(reply) if reply.confidence >= policy.confidence_gate => {
                return Ok(RefineOutcome {
                    mask: reply.mask,
                    confidence: reply.confidence,
                    attempts: attempt + 1,
                    accepted: true,
                    failed: false,
                });
            }
            Ok(reply) => best = best.max(reply.confidence),
        }
    }
    Ok(fallback(best, policy.max_attempts, false))
}

/// Region growing from the prompt points inside the prompt box: a 4-connected
/// neighbour joins while it lies within `tolerance` of the region's running
/// mean intensity. Confidence is the IoU of the grown region with the initial
/// mask restricted to the box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuiltinRefiner {
    pub tolerance: f64,
}

impl Default for BuiltinRefiner {
    fn default() -> Self {
        Self { tolerance: 1.0 }
    }
}

impl BuiltinRefiner {
    pub fn grow(&self, image: &[f32], w: usize, prompts: &PromptSet) -> Vec<bool> {
        let mut region = vec![false; image.len()];
        let mut queue = VecDeque::new();
        let (mut sum, mut n) = (0.0f64, 0usize);
        for &[x, y] in &prompts.points {
            let i = y * w + x;
            if !region[i] {
                region[i] = true;
                sum += image[i] as f64;
                n += 1;
                queue.push_back((x, y));
            }
        }
        let [x0, y0, x1, y1] = prompts.bbox;
        while let Some((x, y)) = queue.pop_front() {
            let neighbours = [
                (y > y0).then(|| (x, y - 1)),
                (y < y1).then(|| (x, y + 1)),
                (x > x0).then(|| (x - 1, y)),
                (x < x1).then(|| (x + 1, y)),
            ];
            for (nx, ny) in neighbours.into_iter().flatten() {
                let j = ny * w + nx;
                if region[j] || ((image[j] as f64) - sum / n as f64).abs() > self.tolerance {
                    continue;
                }
                region[j] = true;
                sum += image[j] as f64;
                n += 1;
                queue.push_back((nx, ny));
            }
        }
        region
    }
}

/// Intersection over union of two masks; two empty masks score 1.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

impl RegionRefiner for BuiltinRefiner {
    fn refine(&mut self, req: &RefineRequest<'_>) -> Result<RefinerReply> {
        let mask = self.grow(req.image, req.w, req.prompts);
        let boxed: Vec<bool> = (0..req.initial.len())
            .map(|i| req.initial[i] && req.prompts.bbox_contains(i % req.w, i / req.w))
            .collect();
        Ok(RefinerReply {
            confidence: iou(&mask, &boxed),
            mask,
        })
    }
}

/// One wire-protocol request line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub h: usize,
    pub w: usize,
    pub image_b64: String,
    pub bbox: [usize; 4],
    pub points: Vec<[usize; 2]>,
}

impl WireRequest {
    pub fn encode(id: u64, req: &RefineRequest<'_>) -> Self {
        let bytes: Vec<u8> = req.image.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            id,
            h: req.h,
            w: req.w,
            image_b64: B64.encode(bytes),
            bbox: req.prompts.bbox,
            points: req.prompts.points.clone(),
        }
    }

    /// Decode the image, checking it holds `h·w` floats.
    pub fn image(&self) -> Result<Vec<f32>> {
        let bytes = B64
            .decode(&self.image_b64)
            .map_err(|e| Error::Refiner(format!("image_b64: {e}")))?;
        if bytes.len() != 4 * self.h * self.w {
            return Err(Error::Refiner(format!(
                "image has {} bytes, expected {}",
                bytes.len(),
                4 * self.h * self.w
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
}

/// One wire-protocol response line. A refiner may answer with `error` instead
/// of a mask; the client treats that as a failed call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WireResponse {
    pub fn from_mask(id: u64, mask: &[bool], confidence: f64) -> Self {
        let bytes: Vec<u8> = mask.iter().map(|&b| b as u8).collect();
        Self {
            id,
            mask_b64: Some(B64.encode(bytes)),
            confidence: Some(confidence),
            error: None,
        }
    }

    pub fn from_error(id: u64, message: impl Into<String>) -> Self {
        Self {
            id,
            mask_b64: None,
            confidence: None,
            error: Some(message.into()),
        }
    }

    /// Validate against the request it answers.
    pub fn decode(&self, id: u64, len: usize) -> Result<RefinerReply> {
        if self.id != id {
            return Err(Error::Refiner(format!("response id {} for request {id}", self.id)));
        }
        if let Some(e) = &self.error {
            return Err(Error::Refiner(format!("refiner reported: {e}")));
        }
        let (Some(mask), Some(confidence)) = (&self.mask_b64, self.confidence) else {
            return Err(Error::Refiner("response lacks mask_b64 or confidence".into()));
        };
        let bytes = B64.decode(mask).map_err(|e| Error::Refiner(format!("mask_b64: {e}")))?;
        if bytes.len() != len {
            return Err(Error::Refiner(format!(
                "mask has {} bytes, expected {len}",
                bytes.len()
            )));
        }
        let mask = bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(Error::Refiner(format!("mask byte {b} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        Ok(RefinerReply { mask, confidence })
    }
}

/// Client for a refiner running as a child process. Requests are sent one at a
/// time; once the child's output ends every further call fails.
pub struct ExternalRefiner {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    next_id: u64,
    closed: bool,
}

impl ExternalRefiner {
    pub fn spawn(argv: &[String]) -> Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| Error::InvalidConfig("external refiner command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Refiner(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child,
            stdin,
            stdout,
            next_id: 0,
            closed: false,
        })
    }

    fn exchange(&mut self, req: &RefineRequest<'_>) -> Result<RefinerReply> {
        if self.closed {
            return Err(Error::Refiner("refiner process has exited".into()));
        }
        let id = self.next_id;
        self.next_id += 1;
        let mut line =
            serde_json::to_string(&WireRequest::encode(id, req)).map_err(|e| Error::Refiner(e.to_string()))?;
        line.push('\n');
        let stdin = self.stdin.as_mut().expect("stdin open while not closed");
        if let Err(e) = stdin.write_all(line.as_bytes()).and_then(|_| stdin.flush()) {
            self.closed = true;
            return Err(Error::Refiner(format!("write to refiner: {e}")));
        }
        let mut answer = String::new();
        match self.stdout.read_line(&mut answer) {
            Ok(0) | Err(_) => {
                self.closed = true;
                return Err(Error::Refiner("refiner closed its output".into()));
            }
            Ok(_) => {}
        }
        let response: WireResponse =
            serde_json::from_str(answer.trim_end()).map_err(|e| Error::Refiner(format!("malformed response: {e}")))?;
        response.decode(id, req.h * req.w)
    }
}

impl RegionRefiner for ExternalRefiner {
    fn refine(&mut self, request: &RefineRequest<'_>) -> Result<RefinerReply> {
        self.exchange(request)
    }
}

impl Drop for ExternalRefiner {
    fn drop(&mut self) {
        drop(self.stdin.take());
        if !matches!(self.child.try_wait(), Ok(Some(_))) {
            let _ = self.child.kill();
        }
        let _ = self.child.wait();
    }
}

/// Serve `refiner` over the wire protocol until `input` ends. Requests that
/// cannot be decoded get an error response and serving continues.
pub fn serve_refiner<R: BufRead, W: Write>(refiner: &mut dyn RegionRefiner, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::Refiner(format!("read request: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<WireRequest>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()))
                    .unwrap_or(0);
                WireResponse::from_error(id, format!("malformed request: {e}"))
            }
            Ok(req) => answer(refiner, &req).unwrap_or_else(|e| WireResponse::from_error(req.id, e.to_string())),
        };
        let mut text = serde_json::to_string(&response).map_err(|e| Error::Refiner(e.to_string()))?;
        text.push('\n');
        output
            .write_all(text.as_bytes())
            .and_then(|_| output.flush())
            .map_err(|e| Error::Refiner(format!("write response: {e}")))?;
    }
    Ok(())
}

fn answer(refiner: &mut dyn RegionRefiner, req: &WireRequest) -> Result<WireResponse> {
    let image = req.image()?;
    let prompts = PromptSet {
        bbox: req.bbox,
        points: req.points.clone(),
        seed: 0,
    };
    let [x0, y0, x1, y1] = req.bbox;
    if x0 > x1 || y0 > y1 || x1 >= req.w || y1 >= req.h {
        return Err(Error::Refiner(format!(
            "bbox {:?} outside {}×{}",
            req.bbox, req.h, req.w
        )));
    }
    if req.points.is_empty() || req.points.iter().any(|&[x, y]| !prompts.bbox_contains(x, y)) {
        return Err(Error::Refiner("points must be nonempty and inside bbox".into()));
    }
    // The wire carries no initial mask; the bbox stands in for it.
    let initial: Vec<bool> = (0..image.len())
        .map(|i| prompts.bbox_contains(i % req.w, i / req.w))
        .collect();
    let reply = refiner.refine(&RefineRequest {
        image: &image,
        initial: &initial,
        h: req.h,
        w: req.w,
        prompts: &prompts,
    })?;
    check_reply(&reply, image.len())?;
    Ok(WireResponse::from_mask(req.id, &reply.mask, reply.confidence))
}
