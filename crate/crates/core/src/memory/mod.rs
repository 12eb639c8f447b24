//! Semi-parametric memory: per-sample compressed cues plus the per-task
//! completion net and entropy model, organized as working memory (current
//! task) and long-term memory (one pruned bundle per completed task).

mod nets;
mod train;

pub use nets::{
    completion_forward, encoder_sizes, separation_forward, PatternCompletionNet,
    PatternSeparationNet, MEMORY_KERNEL, MEMORY_LAYERS, MEMORY_PAD, MEMORY_STRIDE,
};
pub use train::{train_memory_module, MemoryTrainConfig, MemoryTrainLog};

use crate::codec::{quantize, EntropyModel, MemoryCue, QuantizeStats};
use crate::data::DatasetHandle;
use crate::tensor::{checkpoint_byte_len, read_checkpoint, write_checkpoint, Tensor};
use crate::{Error, Result};
use std::io::{Read, Write};

pub const BUNDLE_MAGIC: &[u8; 4] = b"BCMB";
pub const BUNDLE_VERSION: u16 = 1;

/// Warn when more than this fraction of latent symbols clamps.
pub const CLAMP_WARN_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct MemorizeReport {
    pub cue_count: usize,
    pub total_payload_bytes: u64,
    pub clamp_fraction: f64,
    pub clamp_warning: bool,
}

/// Encode every sample of a task into a memory cue: quantize the frozen
/// encoder's latent and range-code it under the task's entropy model.
pub fn memorize(
    sep: &PatternSeparationNet,
    em: &EntropyModel,
    data: &DatasetHandle,
    task_id: u16,
) -> Result<(Vec<MemoryCue>, MemorizeReport)> {
    let mut cues = Vec::with_capacity(data.len());
    let mut stats = QuantizeStats::default();
    let batch = 64;
    let hw = (data.height(), data.width());
    let mut payload = 0u64;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch) {
        let (x, labels) = data.batch(chunk);
        let z = sep.forward(&x)?;
        let (c, lh, lw) = (z.dim(1), z.dim(2), z.dim(3));
        let plane = c * lh * lw;
        for (j, (&i, &label)) in chunk.iter().zip(&labels).enumerate() {
            let zi = Tensor::from_vec(&[c, lh, lw], z.data()[j * plane..(j + 1) * plane].to_vec());
            let (grid, s) = quantize(&zi, em.support_r(), hw);
            stats.clamped += s.clamped;
            stats.total += s.total;
            let cue = MemoryCue::encode(&grid, em, task_id, label, i as u32)?;
            payload += cue.byte_len();
            cues.push(cue);
        }
    }
    let clamp_fraction = stats.clamp_fraction();
    let report = MemorizeReport {
        cue_count: cues.len(),
        total_payload_bytes: payload,
        clamp_fraction,
        clamp_warning: clamp_fraction > CLAMP_WARN_FRACTION,
    };
    Ok((cues, report))
}

/// Decode one cue and run pattern completion; output is clamped to [0, 1]
/// and shaped (3, H, W) from the cue header.
pub fn recall(
    cue: &MemoryCue,
    com: &PatternCompletionNet,
    em: &EntropyModel,
) -> Result<Tensor<f32>> {
    let grid = cue.decode(em)?;
    let z = Tensor::from_vec(
        &[1, grid.channels, grid.h, grid.w],
        grid.symbols.iter().map(|&s| s as f32).collect(),
    );
    let out = com.forward(&z, grid.source_hw)?;
    if !out.all_finite() {
        return Err(Error::Recall("completion output is not finite".into()));
    }
    let (h, w) = grid.source_hw;
    Ok(Tensor::from_vec(
        &[3, h, w],
        out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    ))
}

/// Batched recall for same-resolution cues: decode all, one completion
/// pass. Bit-identical to per-cue [`recall`].
pub fn recall_batch(
    cues: &[&MemoryCue],
    com: &PatternCompletionNet,
    em: &EntropyModel,
) -> Result<Tensor<f32>> {
    assert!(!cues.is_empty());
    let first = cues[0].header;
    let mut zdata =
        Vec::with_capacity(cues.len() * first.c_lat as usize * first.lat_h as usize * first.lat_w as usize);
    for cue in cues {
        if (cue.header.h, cue.header.w) != (first.h, first.w) {
            return Err(Error::Recall(
                "recall_batch requires same-resolution cues".into(),
            ));
        }
        let grid = cue.decode(em)?;
        zdata.extend(grid.symbols.iter().map(|&s| s as f32));
    }
    let z = Tensor::from_vec(
        &[
            cues.len(),
            first.c_lat as usize,
            first.lat_h as usize,
            first.lat_w as usize,
        ],
        zdata,
    );
    let out = com.forward(&z, (first.h as usize, first.w as usize))?;
    if !out.all_finite() {
        return Err(Error::Recall("completion output is not finite".into()));
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// One completed task's memory: pruned cues, the completion net, and the
/// entropy model, with exact byte accounting.
#[derive(Debug, Clone)]
pub struct TaskMemory {
    pub task_id: u16,
    pub classes: Vec<u32>,
    pub cues: Vec<MemoryCue>,
    pub completion: PatternCompletionNet,
    pub entropy_model: EntropyModel,
}

impl TaskMemory {
    pub fn validate(&self) -> Result<()> {
        for cue in &self.cues {
            if !self.classes.contains(&cue.header.class_id) {
                return Err(Error::Protocol(format!(
                    "cue class {} not in task {} class set {:?}",
                    cue.header.class_id, self.task_id, self.classes
                )));
            }
            if cue.header.task_id != self.task_id {
                return Err(Error::Protocol(format!(
                    "cue task {} inside bundle for task {}",
                    cue.header.task_id, self.task_id
                )));
            }
        }
        Ok(())
    }

    pub fn cue_payload_bytes(&self) -> u64 {
        self.cues.iter().map(|c| c.byte_len()).sum()
    }

    pub fn checkpoint_bytes(&self) -> u64 {
        checkpoint_byte_len(&self.completion.store.to_records())
    }

    pub fn entropy_model_bytes(&self) -> u64 {
        self.entropy_model.byte_len()
    }

    pub fn bundle_header_bytes(&self) -> u64 {
        4 + 2 + 2 + 2 + 4 * self.classes.len() as u64 + 4
    }

    /// Exact on-disk size of the serialized bundle: header + cue payloads
    /// + completion checkpoint + entropy model.
    pub fn byte_size(&self) -> u64 {
        self.bundle_header_bytes()
            + self.cue_payload_bytes()
            + self.checkpoint_bytes()
            + self.entropy_model_bytes()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(BUNDLE_MAGIC)?;
        w.write_all(&BUNDLE_VERSION.to_le_bytes())?;
        w.write_all(&self.task_id.to_le_bytes())?;
        w.write_all(&(self.classes.len() as u16).to_le_bytes())?;
        for &c in &self.classes {
            w.write_all(&c.to_le_bytes())?;
        }
        w.write_all(&(self.cues.len() as u32).to_le_bytes())?;
        for cue in &self.cues {
            cue.write_to(w)?;
        }
        write_checkpoint(w, &self.completion.store.to_records())?;
        self.entropy_model.write_to(w)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<TaskMemory> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::Decode(format!("bad bundle magic {magic:02x?}")));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != BUNDLE_VERSION {
            return Err(Error::Decode(format!("unsupported bundle version {version}")));
        }
        r.read_exact(&mut b2)?;
        let task_id = u16::from_le_bytes(b2);
        r.read_exact(&mut b2)?;
        let n_classes = u16::from_le_bytes(b2) as usize;
        let mut classes = Vec::with_capacity(n_classes);
        let mut b4 = [0u8; 4];
        for _ in 0..n_classes {
            r.read_exact(&mut b4)?;
            classes.push(u32::from_le_bytes(b4));
        }
        r.read_exact(&mut b4)?;
        let n_cues = u32::from_le_bytes(b4) as usize;
        let mut cues = Vec::with_capacity(n_cues);
        for _ in 0..n_cues {
            cues.push(MemoryCue::read_from(r)?);
        }
        let records = read_checkpoint(r)?;
        let completion = PatternCompletionNet::from_records(&records)?;
        let entropy_model = EntropyModel::read_from(r)?;
        let tm = TaskMemory {
            task_id,
            classes,
            cues,
            completion,
            entropy_model,
        };
        tm.validate()?;
        Ok(tm)
    }
}

/// Holds exactly one task's full memory between wake and sleep.
#[derive(Debug, Default)]
pub struct WorkingMemory {
    current: Option<TaskMemory>,
}

impl WorkingMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fill(&mut self, memory: TaskMemory) -> Result<()> {
        if self.current.is_some() {
            return Err(Error::Protocol(
                "working memory already holds a task; sleep must clear it first".into(),
            ));
        }
        self.current = Some(memory);
        Ok(())
    }

    pub fn get(&self) -> Option<&TaskMemory> {
        self.current.as_ref()
    }

    pub fn take(&mut self) -> Option<TaskMemory> {
        self.current.take()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_none()
    }
}

/// One pruned bundle per completed task, ids strictly increasing.
#[derive(Debug, Default)]
pub struct LongTermMemory {
    tasks: Vec<TaskMemory>,
}

impl LongTermMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, memory: TaskMemory) -> Result<()> {
        if let Some(last) = self.tasks.last() {
            if memory.task_id <= last.task_id {
                return Err(Error::Protocol(format!(
                    "task ids must be strictly increasing: {} after {}",
                    memory.task_id, last.task_id
                )));
            }
        }
        memory.validate()?;
        self.tasks.push(memory);
        Ok(())
    }

    pub fn tasks(&self) -> &[TaskMemory] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_cues(&self) -> usize {
        self.tasks.iter().map(|t| t.cues.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MemorySizeReport {
    pub bytes: u64,
    pub megabytes: f64,
}

/// Total stored bytes across long-term memory (cues + completion
/// checkpoints + entropy models + bundle headers), MB = bytes / 2^20.
pub fn memory_size_bytes(mem: &LongTermMemory) -> MemorySizeReport {
    let bytes = mem.tasks().iter().map(|t| t.byte_size()).sum();
    MemorySizeReport {
        bytes,
        megabytes: bytes as f64 / (1u64 << 20) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_task_memory(task_id: u16, n_cues: usize) -> TaskMemory {
        let mut rng = ChaCha8Rng::seed_from_u64(task_id as u64);
        let sep = PatternSeparationNet::init([4, 4, 4, 6], 3, &mut rng);
        let com = PatternCompletionNet::init(6, [4, 4, 4, 3], &mut rng);
        let em = EntropyModel::random(6, 8, &mut rng);
        let images = vec![0.5f32; n_cues * 3 * 16 * 16];
        let labels = vec![task_id as u32 * 2; n_cues];
        let data = DatasetHandle::new(images, labels, 16, 16).unwrap();
        let (cues, _) = memorize(&sep, &em, &data, task_id).unwrap();
        TaskMemory {
            task_id,
            classes: vec![task_id as u32 * 2, task_id as u32 * 2 + 1],
            cues,
            completion: com,
            entropy_model: em,
        }
    }

    #[test]
    fn memorize_shapes_and_recall_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sep = PatternSeparationNet::init([128, 128, 128, 192], 3, &mut rng);
        let em = EntropyModel::new_uniform(192, 32);
        let data = DatasetHandle::new(vec![0.0; 3 * 32 * 32], vec![0], 32, 32).unwrap();
        let (cues, report) = memorize(&sep, &em, &data, 0).unwrap();
        assert_eq!(cues.len(), 1);
        // 32x32 input -> latent (192, 2, 2): 768 symbols per cue
        assert_eq!(cues[0].header.c_lat, 192);
        assert_eq!((cues[0].header.lat_h, cues[0].header.lat_w), (2, 2));
        assert_eq!(report.cue_count, 1);

        let com = PatternCompletionNet::init(192, [128, 128, 128, 3], &mut rng);
        let a = recall(&cues[0], &com, &em).unwrap();
        let b = recall(&cues[0], &com, &em).unwrap();
        assert_eq!(a.shape(), &[3, 32, 32]);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn recall_batch_matches_single_recall() {
        let tm = small_task_memory(1, 3);
        let refs: Vec<&MemoryCue> = tm.cues.iter().collect();
        let batch = recall_batch(&refs, &tm.completion, &tm.entropy_model).unwrap();
        for (i, cue) in tm.cues.iter().enumerate() {
            let single = recall(cue, &tm.completion, &tm.entropy_model).unwrap();
            let per = single.numel();
            assert_eq!(&batch.data()[i * per..(i + 1) * per], single.data());
        }
    }

    #[test]
    fn cross_task_recall_is_refused() {
        let a = small_task_memory(1, 1);
        let b = small_task_memory(2, 1);
        let err = recall(&a.cues[0], &b.completion, &b.entropy_model).unwrap_err();
        assert!(matches!(err, Error::Recall(_)));
    }

    #[test]
    fn bundle_roundtrip_and_byte_size() {
        let tm = small_task_memory(3, 4);
        let mut buf = Vec::new();
        tm.write_to(&mut buf).unwrap();
        assert_eq!(buf.len() as u64, tm.byte_size());
        assert_eq!(
            tm.byte_size(),
            tm.bundle_header_bytes()
                + tm.cue_payload_bytes()
                + tm.checkpoint_bytes()
                + tm.entropy_model_bytes()
        );
        let back = TaskMemory::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.task_id, 3);
        assert_eq!(back.cues, tm.cues);
        assert_eq!(
            back.completion.store.content_hash(),
            tm.completion.store.content_hash()
        );
        // recall from the deserialized bundle is identical
        let r1 = recall(&tm.cues[0], &tm.completion, &tm.entropy_model).unwrap();
        let r2 = recall(&back.cues[0], &back.completion, &back.entropy_model).unwrap();
        assert_eq!(r1.data(), r2.data());
    }

    #[test]
    fn long_term_memory_orders_tasks() {
        let mut ltm = LongTermMemory::new();
        ltm.insert(small_task_memory(1, 1)).unwrap();
        ltm.insert(small_task_memory(2, 1)).unwrap();
        assert!(ltm.insert(small_task_memory(2, 1)).is_err());
        assert_eq!(ltm.len(), 2);
        let report = memory_size_bytes(&ltm);
        assert_eq!(
            report.bytes,
            ltm.tasks().iter().map(|t| t.byte_size()).sum::<u64>()
        );
    }

    #[test]
    fn working_memory_holds_one_task() {
        let mut wm = WorkingMemory::new();
        assert!(wm.is_empty());
        wm.fill(small_task_memory(1, 1)).unwrap();
        assert!(wm.fill(small_task_memory(2, 1)).is_err());
        let taken = wm.take().unwrap();
        assert_eq!(taken.task_id, 1);
        assert!(wm.is_empty());
    }

    #[test]
    fn empty_memory_is_zero_bytes() {
        let report = memory_size_bytes(&LongTermMemory::new());
        assert_eq!(report.bytes, 0);
        assert_eq!(report.megabytes, 0.0);
    }
}
