use std::collections::BTreeMap;

use super::adapt::AdaptState;
use super::eval::EvalReport;
use crate::calibration::mnet_specs;
use crate::error::{config, Result};
use crate::geometry::{Counts, MatchCounts};
use crate::labeling::{BankEntry, MemoryBank, PrototypeSet};
use crate::manifest::Manifest;
use crate::mt::Detector;
use crate::nn::{Activation, DenseNet, LayerSpec, Sgd};

impl AdaptState {
    /// Everything needed to resume: both detectors, the mapping network and
    /// probe, the memory bank, both prototype sets and optimizer momentum.
    pub fn to_manifest(&self) -> Manifest {
        let mut m = Manifest::new();
        let d = self.student.d_feat();
        let k = self.student.classes();
        m.set_meta("state.epoch", self.epoch);
        m.set_meta("state.d_feat", d);
        m.set_meta("state.classes", k);
        m.set_meta("state.d_embed", self.probe.input_width());
        m.set_meta("state.bank_capacity", self.bank.capacity());
        self.student.store(&mut m, "student");
        self.teacher.store(&mut m, "teacher");
        m.put_params("mnet.", self.mnet.params());
        m.put_params("probe.", self.probe.params());
        for c in 0..k {
            let q = self.bank.queue(c);
            m.set_meta(&format!("bank.{c}.len"), q.len());
            for (i, e) in q.iter().enumerate() {
                m.put_vec(&format!("bank.{c}.{i}.feature"), &e.feature);
                m.put_vec(&format!("bank.{c}.{i}.confidence"), &[e.confidence]);
            }
        }
        store_protos(&mut m, "protos_z", &self.protos_z);
        store_protos(&mut m, "protos_x", &self.protos_x);
        m.set_meta("opt.count", self.optimizers.len());
        for (o, opt) in self.optimizers.iter().enumerate() {
            m.set_meta(&format!("opt.{o}.lr"), opt.lr);
            m.set_meta(&format!("opt.{o}.momentum"), opt.momentum);
            m.set_meta(&format!("opt.{o}.len"), opt.velocity().len());
            for (i, v) in opt.velocity().iter().enumerate() {
                m.put_vec(&format!("opt.{o}.{i}"), v);
            }
        }
        m.set_meta("source.map", self.source.map);
        for (c, counts) in &self.source.counts.per_class {
            m.set_meta(&format!("source.class.{c}"), format!("{},{},{}", counts.tp, counts.fp, counts.fn_));
        }
        m
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        let d: usize = m.meta_parse("state.d_feat")?;
        let k: usize = m.meta_parse("state.classes")?;
        let d_embed: usize = m.meta_parse("state.d_embed")?;
        let student = Detector::load(m, "student", d, k)?;
        let teacher = Detector::load(m, "teacher", d, k)?;
        let mnet = DenseNet::from_params(&mnet_specs(d, d_embed), m.take_params("mnet.")?)?;
        let probe = DenseNet::from_params(
            &[LayerSpec::new(d_embed, k + 1, Activation::Identity, false)],
            m.take_params("probe.")?,
        )?;
        let mut queues = Vec::with_capacity(k);
        for c in 0..k {
            let n: usize = m.meta_parse(&format!("bank.{c}.len"))?;
            let mut q = Vec::with_capacity(n);
            for i in 0..n {
                let feature = m.get_vec(&format!("bank.{c}.{i}.feature"))?;
                let confidence = scalar(m, &format!("bank.{c}.{i}.confidence"))?;
                q.push(BankEntry { feature, confidence });
            }
            queues.push(q);
        }
        let bank = MemoryBank::from_queues(m.meta_parse("state.bank_capacity")?, queues)?;
        let n_opt: usize = m.meta_parse("opt.count")?;
        let mut optimizers = Vec::with_capacity(n_opt);
        for o in 0..n_opt {
            let mut opt = Sgd::new(m.meta_parse(&format!("opt.{o}.lr"))?, m.meta_parse(&format!("opt.{o}.momentum"))?)?;
            let n: usize = m.meta_parse(&format!("opt.{o}.len"))?;
            opt.set_velocity((0..n).map(|i| m.get_vec(&format!("opt.{o}.{i}"))).collect::<Result<_>>()?);
            optimizers.push(opt);
        }
        let mut per_class = BTreeMap::new();
        for (key, value) in &m.meta {
            if let Some(c) = key.strip_prefix("source.class.") {
                let c: usize = c.parse().map_err(|_| config(format!("bad class key {key}")))?;
                let v: Vec<usize> = value
                    .split(',')
                    .map(|x| x.parse().map_err(|_| config(format!("bad counts for {key}"))))
                    .collect::<Result<_>>()?;
                if v.len() != 3 {
                    return Err(config(format!("bad counts for {key}")));
                }
                per_class.insert(c, Counts { tp: v[0], fp: v[1], fn_: v[2] });
            }
        }
        let counts = MatchCounts { per_class };
        let source = EvalReport { total: counts.total(), counts, map: m.meta_parse("source.map")? };
        Ok(Self {
            student,
            teacher,
            mnet,
            probe,
            bank,
            protos_z: load_protos(m, "protos_z", k)?,
            protos_x: load_protos(m, "protos_x", k)?,
            optimizers,
            epoch: m.meta_parse("state.epoch")?,
            source,
        })
    }
}

fn scalar(m: &Manifest, name: &str) -> Result<f64> {
    match m.get_vec(name)?.as_slice() {
        [v] => Ok(*v),
        _ => Err(config(format!("{name} should hold one value"))),
    }
}

fn store_protos(m: &mut Manifest, prefix: &str, p: &PrototypeSet) {
    m.set_meta(&format!("{prefix}.step"), p.step);
    for (c, proto) in p.centroids().iter().enumerate() {
        if let Some(v) = proto {
            m.put_vec(&format!("{prefix}.{c}"), v);
        }
    }
}

fn load_protos(m: &Manifest, prefix: &str, k: usize) -> Result<PrototypeSet> {
    let mut p = PrototypeSet::new(k);
    p.step = m.meta_parse(&format!("{prefix}.step"))?;
    let get = |c: usize| -> Result<Option<Vec<f64>>> {
        let name = format!("{prefix}.{c}");
        if m.has_tensor(&name) {
            m.get_vec(&name).map(Some)
        } else {
            Ok(None)
        }
    };
    for c in 0..k {
        p.foreground[c] = get(c)?;
    }
    p.background = get(k)?;
    Ok(p)
}
