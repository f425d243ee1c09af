//! Feature-extractor assemblies: a four-stage residual network producing a
//! 512-dimensional embedding, and a two-stage toy network (embedding 16)
//! fast enough for CPU tests.
//!
//! Both expose the same surface: staged training forward with a hook called
//! after each stage (where statistic mixing is inserted), a hook-free eval
//! forward, full backward, and parameter/MAC accounting.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward, BasicBlock,
    BasicBlockCache, BatchNorm2d, BatchNorm2dCache, Conv2d, Conv2dCache, MaxPool2d,
    MaxPool2dCache, StateTensor, StateTensorMut,
};
use crate::stats_mixing::{mix_backward, MixCache};
use crate::tensor::Tensor4;

/// Hook invoked after each stage during a training forward. Receives the
/// 1-based stage index and the stage output; returns the (possibly mixed)
/// tensor plus the mixing cache when the layer was active.
pub type StageHook<'a> = dyn FnMut(usize, Tensor4) -> Result<(Tensor4, Option<MixCache>)> + 'a;

// ---------------------------------------------------------------------------
// ResNet-18
// ---------------------------------------------------------------------------

pub struct ResNet18 {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub pool: MaxPool2d,
    pub stages: Vec<Vec<BasicBlock>>,
}

pub struct ResNet18Cache {
    conv1: Conv2dCache,
    bn1: BatchNorm2dCache,
    stem_relu_out: Tensor4,
    pool: MaxPool2dCache,
    blocks: Vec<BasicBlockCache>,
    mixes: Vec<Option<MixCache>>,
    final_shape: (usize, usize, usize, usize),
}

impl ResNet18 {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let widths = [64usize, 128, 256, 512];
        let mut stages = Vec::new();
        let mut in_c = 64;
        for (i, &out_c) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let mut blocks = Vec::new();
            blocks.push(BasicBlock::new(in_c, out_c, stride, rng));
            blocks.push(BasicBlock::new(out_c, out_c, 1, rng));
            stages.push(blocks);
            in_c = out_c;
        }
        Self {
            conv1: Conv2d::new(3, 64, 7, 2, 3, rng),
            bn1: BatchNorm2d::new(64),
            pool: MaxPool2d {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            stages,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        512
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self
                .stages
                .iter()
                .flatten()
                .map(|b| b.param_count())
                .sum::<usize>()
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        if h < 32 || w < 32 {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} too small for the four-stage backbone"
            )));
        }
        let mut total = self.conv1.macs(h, w);
        let (mut ch, mut cw) = self.conv1.out_shape(h, w);
        let (ph, pw) = self.pool.out_shape(ch, cw);
        ch = ph;
        cw = pw;
        for stage in &self.stages {
            for block in stage {
                let (m, oh, ow) = block.macs(ch, cw);
                total += m;
                ch = oh;
                cw = ow;
            }
        }
        Ok(total)
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Vec<f64> {
        let mut t = self.bn1.forward_eval(&self.conv1.forward(x));
        relu_forward(&mut t);
        let mut t = self.pool.forward(&t);
        for stage in &self.stages {
            for block in stage {
                t = block.forward_eval(&t);
            }
        }
        global_avg_pool(&t)
    }

    pub fn forward_train(
        &mut self,
        x: &Tensor4,
        update_running: bool,
        hook: &mut StageHook<'_>,
    ) -> Result<(Vec<f64>, ResNet18Cache)> {
        let (c1, conv1) = self.conv1.forward_train(x);
        let (mut t, bn1) = self.bn1.forward_train(&c1, update_running);
        relu_forward(&mut t);
        let stem_relu_out = t.clone();
        let (mut t, pool) = self.pool.forward_train(&t);
        let mut blocks = Vec::with_capacity(8);
        let mut mixes = Vec::with_capacity(4);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for block in stage.iter_mut() {
                let (out, cache) = block.forward_train(&t, update_running);
                t = out;
                blocks.push(cache);
            }
            let (mixed, mix_cache) = hook(si + 1, t)?;
            t = mixed;
            mixes.push(mix_cache);
        }
        let final_shape = t.shape();
        let z = global_avg_pool(&t);
        Ok((
            z,
            ResNet18Cache {
                conv1,
                bn1,
                stem_relu_out,
                pool,
                blocks,
                mixes,
                final_shape,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ResNet18Cache, grad_z: &[f64]) -> Result<()> {
        let (b, c, h, w) = cache.final_shape;
        let mut g = global_avg_pool_backward(grad_z, b, c, h, w);
        let mut block_idx = cache.blocks.len();
        for si in (0..self.stages.len()).rev() {
            if let Some(mix) = &cache.mixes[si] {
                g = mix_backward(&g, mix)?;
            }
            for block in self.stages[si].iter_mut().rev() {
                block_idx -= 1;
                g = block.backward(&cache.blocks[block_idx], &g);
            }
        }
        let mut g = self.pool.backward(&cache.pool, &g);
        relu_backward(&mut g, &cache.stem_relu_out);
        let g = self.bn1.backward(&cache.bn1, &g);
        self.conv1.backward(&cache.conv1, &g);
        Ok(())
    }

    pub fn state<'a>(&'a self, out: &mut Vec<StateTensor<'a>>) {
        self.conv1.state("extractor.conv1", out);
        self.bn1.state("extractor.bn1", out);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                block.state(&format!("extractor.stage{}.block{}", si + 1, bi), out);
            }
        }
    }

    pub fn state_mut<'a>(&'a mut self, out: &mut Vec<StateTensorMut<'a>>) {
        self.conv1.state_mut("extractor.conv1", out);
        self.bn1.state_mut("extractor.bn1", out);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.state_mut(&format!("extractor.stage{}.block{}", si + 1, bi), out);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.bn1.zero_grad();
        self.stages.iter_mut().flatten().for_each(|b| b.zero_grad());
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        self.conv1.sgd_step(lr, momentum, weight_decay);
        self.bn1.sgd_step(lr, momentum, weight_decay);
        self.stages
            .iter_mut()
            .flatten()
            .for_each(|b| b.sgd_step(lr, momentum, weight_decay));
    }
}

// ---------------------------------------------------------------------------
// Toy backbone
// ---------------------------------------------------------------------------

/// Two conv-bn-relu stages (3 -> 8 -> 16 channels, stride 2 each), global
/// average pooled to a 16-dimensional embedding.
pub struct ToyNet {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

pub struct ToyNetCache {
    conv1: Conv2dCache,
    bn1: BatchNorm2dCache,
    relu1_out: Tensor4,
    conv2: Conv2dCache,
    bn2: BatchNorm2dCache,
    relu2_out: Tensor4,
    mixes: Vec<Option<MixCache>>,
    final_shape: (usize, usize, usize, usize),
}

impl ToyNet {
    pub fn new<R: Rng>(rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(3, 8, 3, 2, 1, rng),
            bn1: BatchNorm2d::new(8),
            conv2: Conv2d::new(8, 16, 3, 2, 1, rng),
            bn2: BatchNorm2d::new(16),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        16
    }

    pub fn stage_count(&self) -> usize {
        2
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.bn1.param_count()
            + self.conv2.param_count()
            + self.bn2.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        if h < 4 || w < 4 {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} too small for the toy backbone"
            )));
        }
        let mut total = self.conv1.macs(h, w);
        let (oh, ow) = self.conv1.out_shape(h, w);
        total += self.conv2.macs(oh, ow);
        Ok(total)
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Vec<f64> {
        let mut t = self.bn1.forward_eval(&self.conv1.forward(x));
        relu_forward(&mut t);
        let mut t = self.bn2.forward_eval(&self.conv2.forward(&t));
        relu_forward(&mut t);
        global_avg_pool(&t)
    }

    pub fn forward_train(
        &mut self,
        x: &Tensor4,
        update_running: bool,
        hook: &mut StageHook<'_>,
    ) -> Result<(Vec<f64>, ToyNetCache)> {
        let (c1, conv1) = self.conv1.forward_train(x);
        let (mut t, bn1) = self.bn1.forward_train(&c1, update_running);
        relu_forward(&mut t);
        let relu1_out = t.clone();
        let (mut t, mix1) = hook(1, t)?;

        let (c2, conv2) = self.conv2.forward_train(&t);
        let (mut t2, bn2) = self.bn2.forward_train(&c2, update_running);
        relu_forward(&mut t2);
        let relu2_out = t2.clone();
        let (t2, mix2) = hook(2, t2)?;
        t = t2;

        let final_shape = t.shape();
        let z = global_avg_pool(&t);
        Ok((
            z,
            ToyNetCache {
                conv1,
                bn1,
                relu1_out,
                conv2,
                bn2,
                relu2_out,
                mixes: vec![mix1, mix2],
                final_shape,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ToyNetCache, grad_z: &[f64]) -> Result<()> {
        let (b, c, h, w) = cache.final_shape;
        let mut g = global_avg_pool_backward(grad_z, b, c, h, w);
        if let Some(mix) = &cache.mixes[1] {
            g = mix_backward(&g, mix)?;
        }
        relu_backward(&mut g, &cache.relu2_out);
        let g2 = self.bn2.backward(&cache.bn2, &g);
        let mut g1 = self.conv2.backward(&cache.conv2, &g2);
        if let Some(mix) = &cache.mixes[0] {
            g1 = mix_backward(&g1, mix)?;
        }
        relu_backward(&mut g1, &cache.relu1_out);
        let g0 = self.bn1.backward(&cache.bn1, &g1);
        self.conv1.backward(&cache.conv1, &g0);
        Ok(())
    }

    pub fn state<'a>(&'a self, out: &mut Vec<StateTensor<'a>>) {
        self.conv1.state("extractor.conv1", out);
        self.bn1.state("extractor.bn1", out);
        self.conv2.state("extractor.conv2", out);
        self.bn2.state("extractor.bn2", out);
    }

    pub fn state_mut<'a>(&'a mut self, out: &mut Vec<StateTensorMut<'a>>) {
        self.conv1.state_mut("extractor.conv1", out);
        self.bn1.state_mut("extractor.bn1", out);
        self.conv2.state_mut("extractor.conv2", out);
        self.bn2.state_mut("extractor.bn2", out);
    }

    pub fn zero_grad(&mut self) {
        self.conv1.zero_grad();
        self.bn1.zero_grad();
        self.conv2.zero_grad();
        self.bn2.zero_grad();
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        self.conv1.sgd_step(lr, momentum, weight_decay);
        self.bn1.sgd_step(lr, momentum, weight_decay);
        self.conv2.sgd_step(lr, momentum, weight_decay);
        self.bn2.sgd_step(lr, momentum, weight_decay);
    }
}

// ---------------------------------------------------------------------------
// Dispatch enum
// ---------------------------------------------------------------------------

pub enum BackboneNet {
    Resnet18(ResNet18),
    Toy(ToyNet),
}

pub enum BackboneCache {
    Resnet18(ResNet18Cache),
    Toy(ToyNetCache),
}

impl BackboneNet {
    pub fn embedding_dim(&self) -> usize {
        match self {
            BackboneNet::Resnet18(n) => n.embedding_dim(),
            BackboneNet::Toy(n) => n.embedding_dim(),
        }
    }

    pub fn stage_count(&self) -> usize {
        match self {
            BackboneNet::Resnet18(n) => n.stage_count(),
            BackboneNet::Toy(n) => n.stage_count(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            BackboneNet::Resnet18(n) => n.param_count(),
            BackboneNet::Toy(n) => n.param_count(),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        match self {
            BackboneNet::Resnet18(n) => n.macs(h, w),
            BackboneNet::Toy(n) => n.macs(h, w),
        }
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Vec<f64> {
        match self {
            BackboneNet::Resnet18(n) => n.forward_eval(x),
            BackboneNet::Toy(n) => n.forward_eval(x),
        }
    }

    pub fn forward_train(
        &mut self,
        x: &Tensor4,
        update_running: bool,
        hook: &mut StageHook<'_>,
    ) -> Result<(Vec<f64>, BackboneCache)> {
        match self {
            BackboneNet::Resnet18(n) => {
                let (z, c) = n.forward_train(x, update_running, hook)?;
                Ok((z, BackboneCache::Resnet18(c)))
            }
            BackboneNet::Toy(n) => {
                let (z, c) = n.forward_train(x, update_running, hook)?;
                Ok((z, BackboneCache::Toy(c)))
            }
        }
    }

    pub fn backward(&mut self, cache: &BackboneCache, grad_z: &[f64]) -> Result<()> {
        match (self, cache) {
            (BackboneNet::Resnet18(n), BackboneCache::Resnet18(c)) => n.backward(c, grad_z),
            (BackboneNet::Toy(n), BackboneCache::Toy(c)) => n.backward(c, grad_z),
            _ => Err(Error::InvalidArgument(
                "backbone/cache variant mismatch".into(),
            )),
        }
    }

    pub fn state<'a>(&'a self, out: &mut Vec<StateTensor<'a>>) {
        match self {
            BackboneNet::Resnet18(n) => n.state(out),
            BackboneNet::Toy(n) => n.state(out),
        }
    }

    pub fn state_mut<'a>(&'a mut self, out: &mut Vec<StateTensorMut<'a>>) {
        match self {
            BackboneNet::Resnet18(n) => n.state_mut(out),
            BackboneNet::Toy(n) => n.state_mut(out),
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            BackboneNet::Resnet18(n) => n.zero_grad(),
            BackboneNet::Toy(n) => n.zero_grad(),
        }
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        match self {
            BackboneNet::Resnet18(n) => n.sgd_step(lr, momentum, weight_decay),
            BackboneNet::Toy(n) => n.sgd_step(lr, momentum, weight_decay),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn no_mix() -> Box<dyn FnMut(usize, Tensor4) -> Result<(Tensor4, Option<MixCache>)>> {
        Box::new(|_, t| Ok((t, None)))
    }

    #[test]
    fn resnet18_parameter_count_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let net = ResNet18::new(&mut rng);
        // 11,176,512 backbone parameters for the standard 18-layer layout
        assert_eq!(net.param_count(), 11_176_512);
    }

    #[test]
    fn resnet18_macs_at_224() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let net = ResNet18::new(&mut rng);
        // conv stack of the 18-layer layout at 224x224
        assert_eq!(net.macs(224, 224).unwrap(), 1_813_561_344);
        assert!(net.macs(16, 16).is_err());
    }

    #[test]
    fn toy_param_count_matches_hand_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let net = ToyNet::new(&mut rng);
        // conv1 8*3*9 + bn1 16 + conv2 16*8*9 + bn2 32
        assert_eq!(net.param_count(), 216 + 16 + 1152 + 32);
    }

    #[test]
    fn toy_macs_at_64_match_hand_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let net = ToyNet::new(&mut rng);
        // conv1: 8*3*9*32*32, conv2: 16*8*9*16*16
        assert_eq!(net.macs(64, 64).unwrap(), 221_184 + 294_912);
    }

    #[test]
    fn toy_forward_shapes_and_determinism() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut net = ToyNet::new(&mut rng);
        let data: Vec<f64> = (0..2 * 3 * 16 * 16).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor4::from_vec(data, 2, 3, 16, 16).unwrap();
        let (z1, _) = net.forward_train(&x, false, &mut *no_mix()).unwrap();
        let (z2, _) = net.forward_train(&x, false, &mut *no_mix()).unwrap();
        assert_eq!(z1.len(), 2 * 16);
        assert_eq!(z1, z2);
        let ze = net.forward_eval(&x);
        assert_eq!(ze.len(), 2 * 16);
    }

    #[test]
    fn toy_backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut net = ToyNet::new(&mut rng);
        let data: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor4::from_vec(data, 2, 3, 8, 8).unwrap();
        let loss_w: Vec<f64> = (0..2 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();

        let loss = |net: &mut ToyNet, x: &Tensor4| -> f64 {
            let (z, _) = net.forward_train(x, false, &mut *no_mix()).unwrap();
            z.iter().zip(&loss_w).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward_train(&x, false, &mut *no_mix()).unwrap();
        net.zero_grad();
        net.backward(&cache, &loss_w).unwrap();

        let h = 1e-6;
        for i in (0..net.conv1.weight.value.len()).step_by(17) {
            let orig = net.conv1.weight.value[i];
            net.conv1.weight.value[i] = orig + h;
            let lp = loss(&mut net, &x);
            net.conv1.weight.value[i] = orig - h;
            let lm = loss(&mut net, &x);
            net.conv1.weight.value[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = net.conv1.weight.grad[i];
            assert!((a - fd).abs() < 1e-5 * (1.0 + fd.abs()), "{a} vs {fd}");
        }
        for i in 0..net.bn2.gamma.value.len() {
            let orig = net.bn2.gamma.value[i];
            net.bn2.gamma.value[i] = orig + h;
            let lp = loss(&mut net, &x);
            net.bn2.gamma.value[i] = orig - h;
            let lm = loss(&mut net, &x);
            net.bn2.gamma.value[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = net.bn2.gamma.grad[i];
            assert!((a - fd).abs() < 1e-5 * (1.0 + fd.abs()), "{a} vs {fd}");
        }
    }

    #[test]
    fn resnet_eval_forward_runs_small() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let net = ResNet18::new(&mut rng);
        let data: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i % 97) as f64) / 97.0).collect();
        let x = Tensor4::from_vec(data, 1, 3, 32, 32).unwrap();
        let z = net.forward_eval(&x);
        assert_eq!(z.len(), 512);
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn state_names_are_unique_and_complete() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let net = ResNet18::new(&mut rng);
        let mut out = Vec::new();
        net.state(&mut out);
        let mut names: Vec<&str> = out.iter().map(|t| t.name.as_str()).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total);
        let trainable: usize = out
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.data.len())
            .sum();
        assert_eq!(trainable, net.param_count());
    }
}
