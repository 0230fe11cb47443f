//! Corpus ingestion, tokenization and the two pretraining objectives:
//! left-to-right language modeling and span-corruption denoising.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;

use crate::error::{Error, Result};

/// Row-major matrix of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
}

impl IdMatrix {
    pub fn new(rows: usize, cols: usize, ids: Vec<u32>) -> Result<Self> {
        if rows * cols != ids.len() {
            return Err(Error::Dimension(format!(
                "{}x{} id matrix with {} ids",
                rows,
                cols,
                ids.len()
            )));
        }
        Ok(Self { rows, cols, ids })
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    /// Sub-matrix of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            ids: self.ids[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub mask: u32,
    pub begin: u32,
    pub end: u32,
}

#[derive(Debug, Clone)]
pub enum Tokenizer {
    /// One id per byte plus four specials (vocabulary 260).
    Bytes,
    /// External vocabulary, one token per line; specials follow the file's ids.
    Vocab {
        tokens: Vec<String>,
        index: HashMap<String, u32>,
        max_len: usize,
    },
}

impl Tokenizer {
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.is_empty() {
            return Err(Error::Data(format!("vocabulary {} is empty", path.display())));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Data(format!("empty token at line {}", i + 1)));
            }
            index.entry(t.clone()).or_insert(i as u32);
        }
        let max_len = tokens.iter().map(|t| t.len()).max().unwrap_or(1);
        Ok(Tokenizer::Vocab {
            tokens,
            index,
            max_len,
        })
    }

    fn base_size(&self) -> u32 {
        match self {
            Tokenizer::Bytes => 256,
            Tokenizer::Vocab { tokens, .. } => tokens.len() as u32,
        }
    }

    pub fn specials(&self) -> SpecialIds {
        let b = self.base_size();
        SpecialIds {
            pad: b,
            mask: b + 1,
            begin: b + 2,
            end: b + 3,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.base_size() as usize + 4
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Tokenizer::Bytes => Ok(text.bytes().map(u32::from).collect()),
            Tokenizer::Vocab { index, max_len, .. } => {
                // Greedy longest match.
                let mut out = Vec::new();
                let mut pos = 0;
                while pos < text.len() {
                    let mut found = None;
                    let mut end = (pos + max_len).min(text.len());
                    while end > pos {
                        if text.is_char_boundary(end) {
                            if let Some(&id) = index.get(&text[pos..end]) {
                                found = Some((id, end));
                                break;
                            }
                        }
                        end -= 1;
                    }
                    let (id, next) = found.ok_or_else(|| {
                        Error::Data(format!("no vocabulary token covers byte offset {pos}"))
                    })?;
                    out.push(id);
                    pos = next;
                }
                Ok(out)
            }
        }
    }

    /// Inverse of [`Tokenizer::encode`]; special ids are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let base = self.base_size();
        match self {
            Tokenizer::Bytes => {
                let bytes: Vec<u8> = ids.iter().filter(|&&i| i < base).map(|&i| i as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Vocab { tokens, .. } => ids
                .iter()
                .filter(|&&i| i < base)
                .map(|&i| tokens[i as usize].as_str())
                .collect(),
        }
    }
}

/// Text files under `path` (a file, or a directory's regular files in
/// lexicographic filename order).
pub fn corpus_files(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let p = entry.path();
        if p.is_file() {
            files.push(p);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Fixed-length token sequences; a sequence never spans two documents and
/// the last chunk of each document is padded.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub sequences: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub specials: SpecialIds,
}

impl Corpus {
    pub fn from_documents<S: AsRef<str>>(
        docs: &[S],
        seq_len: usize,
        tokenizer: &Tokenizer,
    ) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("seq_len must be positive".into()));
        }
        let specials = tokenizer.specials();
        let mut sequences = Vec::new();
        for doc in docs {
            let ids = tokenizer.encode(doc.as_ref())?;
            for chunk in ids.chunks(seq_len) {
                let mut s = chunk.to_vec();
                s.resize(seq_len, specials.pad);
                sequences.push(s);
            }
        }
        if sequences.is_empty() {
            return Err(Error::Data("corpus contains no tokens".into()));
        }
        Ok(Self {
            sequences,
            seq_len,
            specials,
        })
    }

    /// Reads every file under `path` as one document.
    pub fn ingest(path: &Path, seq_len: usize, tokenizer: &Tokenizer) -> Result<Self> {
        let files = corpus_files(path)?;
        let mut docs = Vec::with_capacity(files.len());
        for f in &files {
            docs.push(fs::read_to_string(f).map_err(|e| Error::io(f, e))?);
        }
        Self::from_documents(&docs, seq_len, tokenizer)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Moves the last `ceil(fraction · n)` sequences into a held-out corpus.
    /// At least one sequence stays on each side when `n ≥ 2`.
    pub fn split_holdout(mut self, fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..1.0).contains(&fraction) || self.len() < 2 {
            return Err(Error::Data(format!(
                "cannot hold out {fraction} of {} sequences",
                self.len()
            )));
        }
        let n = self.len();
        let k = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
        let held = self.sequences.split_off(n - k);
        let heldout = Corpus {
            sequences: held,
            seq_len: self.seq_len,
            specials: self.specials,
        };
        Ok((self, heldout))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamPos {
    pub epoch: u64,
    pub cursor: usize,
}

/// Endless stream over a corpus, reshuffled every epoch by a permutation
/// derived from `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct SequenceStream {
    corpus: Corpus,
    seed: u64,
    pos: StreamPos,
    order: Vec<usize>,
}

impl SequenceStream {
    pub fn new(corpus: Corpus, seed: u64) -> Self {
        let mut s = Self {
            order: Vec::new(),
            corpus,
            seed,
            pos: StreamPos::default(),
        };
        s.order = s.permutation(0);
        s
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn position(&self) -> StreamPos {
        self.pos
    }

    pub fn seek(&mut self, pos: StreamPos) {
        if pos.epoch != self.pos.epoch || self.order.is_empty() {
            self.order = self.permutation(pos.epoch);
        }
        self.pos = pos;
    }

    pub fn next_sequence(&mut self) -> &[u32] {
        if self.pos.cursor >= self.order.len() {
            self.pos = StreamPos {
                epoch: self.pos.epoch + 1,
                cursor: 0,
            };
            self.order = self.permutation(self.pos.epoch);
        }
        let idx = self.order[self.pos.cursor];
        self.pos.cursor += 1;
        &self.corpus.sequences[idx]
    }

    fn take(&mut self, n: usize) -> Vec<u32> {
        let mut ids = Vec::with_capacity(n * self.corpus.seq_len);
        for _ in 0..n {
            ids.extend_from_slice(self.next_sequence());
        }
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Lm,
    Denoise,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Lm => "LM",
            Task::Denoise => "DENOISE",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: IdMatrix,
    pub targets: IdMatrix,
    /// True where `targets` holds a token that contributes to the loss.
    pub loss_mask: Vec<bool>,
    /// True at non-padding input positions (visible as attention keys).
    pub valid: Vec<bool>,
    pub task: Task,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.rows
    }

    pub fn loss_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Batch {
        let c = self.inputs.cols;
        Batch {
            inputs: self.inputs.slice_rows(start, end),
            targets: self.targets.slice_rows(start, end),
            loss_mask: self.loss_mask[start * c..end * c].to_vec(),
            valid: self.valid[start * c..end * c].to_vec(),
            task: self.task,
        }
    }
}

/// Next-token batch: `targets[t] = inputs[t + 1]`, masked out where that
/// next token is padding or beyond the sequence.
pub fn make_lm_batch(stream: &mut SequenceStream, batch_size: usize) -> Batch {
    let seq = stream.corpus.seq_len;
    let pad = stream.corpus.specials.pad;
    let ids = stream.take(batch_size);
    lm_batch_from_ids(ids, batch_size, seq, pad)
}

pub fn lm_batch_from_ids(ids: Vec<u32>, batch_size: usize, seq: usize, pad: u32) -> Batch {
    let mut targets = vec![pad; ids.len()];
    let mut loss_mask = vec![false; ids.len()];
    for r in 0..batch_size {
        for t in 0..seq.saturating_sub(1) {
            let next = ids[r * seq + t + 1];
            targets[r * seq + t] = next;
            loss_mask[r * seq + t] = next != pad;
        }
    }
    let valid = ids.iter().map(|&i| i != pad).collect();
    Batch {
        inputs: IdMatrix::new(batch_size, seq, ids).expect("sized"),
        targets: IdMatrix::new(batch_size, seq, targets).expect("sized"),
        loss_mask,
        valid,
        task: Task::Lm,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseParams {
    pub corrupt_ratio: f64,
    pub mean_span: f64,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self {
            corrupt_ratio: 0.15,
            mean_span: 3.0,
        }
    }
}

impl DenoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.corrupt_ratio > 0.0 && self.corrupt_ratio < 0.5) {
            return Err(Error::Config(format!(
                "corrupt_ratio {} outside (0, 0.5)",
                self.corrupt_ratio
            )));
        }
        if !(self.mean_span >= 1.0) {
            return Err(Error::Config(format!("mean_span {} below 1", self.mean_span)));
        }
        Ok(())
    }
}

/// Marks `round(ratio · n)` of the `n` unpadded positions using spans with
/// geometric lengths of mean `mean_span`.
pub fn corruption_mask<R: Rng>(n: usize, p: &DenoiseParams, rng: &mut R) -> Vec<bool> {
    let mut mask = vec![false; n];
    let target = (p.corrupt_ratio * n as f64).round() as usize;
    if target == 0 {
        return mask;
    }
    let geo = Geometric::new(1.0 / p.mean_span).expect("mean_span >= 1");
    let mut marked = 0;
    while marked < target {
        let start = rng.gen_range(0..n);
        let len = 1 + rng.sample(geo) as usize;
        for m in mask.iter_mut().skip(start).take(len) {
            if marked == target {
                break;
            }
            if !*m {
                *m = true;
                marked += 1;
            }
        }
    }
    mask
}

/// Denoising batch: corrupted positions become the mask id; targets hold the
/// original tokens and the loss covers exactly the corrupted positions.
pub fn make_denoise_batch<R: Rng>(
    stream: &mut SequenceStream,
    batch_size: usize,
    params: &DenoiseParams,
    rng: &mut R,
) -> Result<Batch> {
    params.validate()?;
    let seq = stream.corpus.seq_len;
    let specials = stream.corpus.specials;
    let original = stream.take(batch_size);
    Ok(denoise_batch_from_ids(original, batch_size, seq, specials, params, rng))
}

pub fn denoise_batch_from_ids<R: Rng>(
    original: Vec<u32>,
    batch_size: usize,
    seq: usize,
    specials: SpecialIds,
    params: &DenoiseParams,
    rng: &mut R,
) -> Batch {
    let mut inputs = original.clone();
    let mut loss_mask = vec![false; original.len()];
    for r in 0..batch_size {
        let row = &original[r * seq..(r + 1) * seq];
        let n = row.iter().filter(|&&t| t != specials.pad).count();
        let m = corruption_mask(n, params, rng);
        let mut k = 0;
        for t in 0..seq {
            if row[t] == specials.pad {
                continue;
            }
            if m[k] {
                inputs[r * seq + t] = specials.mask;
                loss_mask[r * seq + t] = true;
            }
            k += 1;
        }
    }
    let valid = original.iter().map(|&i| i != specials.pad).collect();
    Batch {
        inputs: IdMatrix::new(batch_size, seq, inputs).expect("sized"),
        targets: IdMatrix::new(batch_size, seq, original).expect("sized"),
        loss_mask,
        valid,
        task: Task::Denoise,
    }
}

/// Fixed alternation of `lm` LM batches then `denoise` denoising batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSchedule {
    pub lm: u32,
    pub denoise: u32,
}

impl Default for TaskSchedule {
    fn default() -> Self {
        Self { lm: 1, denoise: 1 }
    }
}

impl TaskSchedule {
    pub fn task_for(&self, batch_index: u64) -> Task {
        let period = (self.lm + self.denoise).max(1) as u64;
        if self.denoise == 0 || batch_index % period < self.lm as u64 {
            Task::Lm
        } else {
            Task::Denoise
        }
    }
}

/// Seeded batch producer. Batch `i` depends only on the seed, the stream
/// position and `i`, so resuming from a saved position reproduces it.
#[derive(Debug, Clone)]
pub struct DataPipeline {
    pub stream: SequenceStream,
    pub schedule: TaskSchedule,
    pub denoise: DenoiseParams,
    pub seed: u64,
    pub batches_drawn: u64,
}

impl DataPipeline {
    pub fn new(
        corpus: Corpus,
        seed: u64,
        schedule: TaskSchedule,
        denoise: DenoiseParams,
    ) -> Result<Self> {
        if schedule.denoise > 0 {
            denoise.validate()?;
        }
        Ok(Self {
            stream: SequenceStream::new(corpus, seed),
            schedule,
            denoise,
            seed,
            batches_drawn: 0,
        })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Batch {
        let i = self.batches_drawn;
        self.batches_drawn += 1;
        match self.schedule.task_for(i) {
            Task::Lm => make_lm_batch(&mut self.stream, batch_size),
            Task::Denoise => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.rotate_left(17) ^ i);
                make_denoise_batch(&mut self.stream, batch_size, &self.denoise, &mut rng)
                    .expect("validated at construction")
            }
        }
    }

    pub fn state(&self) -> (StreamPos, u64) {
        (self.stream.position(), self.batches_drawn)
    }

    pub fn restore(&mut self, pos: StreamPos, batches_drawn: u64) {
        self.stream.seek(pos);
        self.batches_drawn = batches_drawn;
    }

    /// Produces the next `count` batches on a worker thread through a
    /// bounded queue of `depth`. Content and order match calling
    /// [`DataPipeline::next_batch`] `count` times.
    pub fn prefetch(
        mut self,
        batch_size: usize,
        count: usize,
        depth: usize,
    ) -> (mpsc::Receiver<Batch>, thread::JoinHandle<DataPipeline>) {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let handle = thread::spawn(move || {
            for _ in 0..count {
                if tx.send(self.next_batch(batch_size)).is_err() {
                    break;
                }
            }
            self
        });
        (rx, handle)
    }
}

/// Fixed evaluation batches (language modeling) over a held-out corpus.
pub fn eval_batches(corpus: &Corpus, batch_size: usize, max_batches: usize) -> Vec<Batch> {
    let seq = corpus.seq_len;
    corpus
        .sequences
        .chunks(batch_size)
        .take(max_batches)
        .map(|chunk| {
            let ids: Vec<u32> = chunk.iter().flatten().copied().collect();
            lm_batch_from_ids(ids, chunk.len(), seq, corpus.specials.pad)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(text: &str, seq: usize) -> Corpus {
        Corpus::from_documents(&[text], seq, &Tokenizer::Bytes).unwrap()
    }

    #[test]
    fn ten_bytes_make_three_sequences() {
        let c = corpus("abcdefghij", 4);
        assert_eq!(c.len(), 3);
        assert_eq!(c.sequences[2], vec![b'i' as u32, b'j' as u32, 256, 256]);
    }

    #[test]
    fn empty_corpus_is_data_error() {
        assert!(matches!(
            Corpus::from_documents(&[""], 4, &Tokenizer::Bytes),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn lm_batch_shift() {
        let (a, b, c) = (b'a' as u32, b'b' as u32, b'c' as u32);
        let batch = lm_batch_from_ids(vec![a, b, c, 256], 1, 4, 256);
        assert_eq!(&batch.targets.ids[..2], &[b, c]);
        assert_eq!(batch.loss_mask, vec![true, true, false, false]);
        assert_eq!(batch.valid, vec![true, true, true, false]);
    }

    #[test]
    fn zero_ratio_corrupts_nothing() {
        let mut s = SequenceStream::new(corpus("hello world, hello", 8), 1);
        let p = DenoiseParams {
            corrupt_ratio: 1e-9,
            mean_span: 3.0,
        };
        let b = make_denoise_batch(&mut s, 2, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.loss_mask.iter().all(|m| !m));
        assert_eq!(b.inputs, b.targets);
    }

    #[test]
    fn corrupt_ratio_out_of_range() {
        let mut s = SequenceStream::new(corpus("hello", 4), 1);
        for r in [0.0, 0.5, -0.1] {
            let p = DenoiseParams {
                corrupt_ratio: r,
                mean_span: 3.0,
            };
            assert!(matches!(
                make_denoise_batch(&mut s, 1, &p, &mut ChaCha8Rng::seed_from_u64(0)),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn byte_tokenizer_roundtrip() {
        let t = Tokenizer::Bytes;
        let text = "Grüße, world";
        assert_eq!(t.decode(&t.encode(text).unwrap()), text);
        assert_eq!(t.vocab_size(), 260);
    }

    #[test]
    fn vocab_tokenizer_longest_match() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        fs::write(&p, "a\nb\nab\nabc\n c\n").unwrap();
        let t = Tokenizer::from_vocab_file(&p).unwrap();
        assert_eq!(t.encode("abcab").unwrap(), vec![3, 2]);
        assert_eq!(t.decode(&[3, 2]), "abcab");
        assert_eq!(t.specials().pad, 5);
        assert!(matches!(t.encode("z"), Err(Error::Data(_))));
    }

    #[test]
    fn task_schedule_alternates() {
        let s = TaskSchedule::default();
        let tasks: Vec<Task> = (0..4).map(|i| s.task_for(i)).collect();
        assert_eq!(tasks, vec![Task::Lm, Task::Denoise, Task::Lm, Task::Denoise]);
        let lm_only = TaskSchedule { lm: 1, denoise: 0 };
        assert!((0..5).all(|i| lm_only.task_for(i) == Task::Lm));
    }

    #[test]
    fn stream_seek_resumes() {
        let c = corpus(&"the quick brown fox ".repeat(20), 8);
        let mut a = SequenceStream::new(c.clone(), 9);
        for _ in 0..57 {
            a.next_sequence();
        }
        let pos = a.position();
        let next: Vec<u32> = a.next_sequence().to_vec();
        let mut b = SequenceStream::new(c, 9);
        b.seek(pos);
        assert_eq!(b.next_sequence(), &next[..]);
    }

    #[test]
    fn prefetch_matches_direct_order() {
        let c = corpus(&"lorem ipsum dolor sit amet ".repeat(30), 16);
        let p = DataPipeline::new(c, 4, TaskSchedule::default(), DenoiseParams::default()).unwrap();
        let mut direct = p.clone();
        let (rx, h) = p.prefetch(3, 10, 2);
        for b in rx {
            assert_eq!(b, direct.next_batch(3));
        }
        assert_eq!(h.join().unwrap().state(), direct.state());
    }
}
