//! Camera adapter: space-to-depth, strided convolutions and residual blocks
//! applied per frame, flattened to the latent width and grouped along time.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::PlueckerMap;
use crate::latent::LatentSequence;

#[derive(Debug, Error, PartialEq)]
pub enum AdapterError {
    #[error("space-to-depth factor {factor} does not divide {height}x{width}")]
    NotDivisible { factor: usize, height: usize, width: usize },
    #[error("factor must be at least 1")]
    ZeroFactor,
    #[error("convolution expects {expected} input channels, got {actual}")]
    Channels { expected: usize, actual: usize },
    #[error("kernel {kernel}x{kernel} with padding {padding} does not fit {height}x{width}")]
    KernelTooLarge {
        kernel: usize,
        padding: usize,
        height: usize,
        width: usize,
    },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("bias has {actual} entries for {expected} output channels")]
    Bias { expected: usize, actual: usize },
    #[error("residual branch changed shape from {input:?} to {output:?}")]
    ResidualShape { input: Vec<usize>, output: Vec<usize> },
    #[error("adapter produces {produced} features per frame, target wants {target}")]
    Unreachable { produced: usize, target: usize },
    #[error("cannot map {frames} frames onto {target} latent frames")]
    Temporal { frames: usize, target: usize },
    #[error("shape mismatch: latent {latent:?}, camera {camera:?}")]
    InjectShape { latent: (usize, usize), camera: (usize, usize) },
}

/// Rearranges `r × r` spatial blocks into channels:
/// `out[c·r² + i·r + j, y, x] = in[c, y·r + i, x·r + j]`.
pub fn space_to_depth(x: ArrayView3<'_, f64>, r: usize) -> Result<Array3<f64>, AdapterError> {
    if r == 0 {
        return Err(AdapterError::ZeroFactor);
    }
    let (c, h, w) = x.dim();
    if h % r != 0 || w % r != 0 {
        return Err(AdapterError::NotDivisible { factor: r, height: h, width: w });
    }
    Ok(Array3::from_shape_fn((c * r * r, h / r, w / r), |(ch, y, xx)| {
        let (src, rem) = (ch / (r * r), ch % (r * r));
        x[[src, y * r + rem / r, xx * r + rem % r]]
    }))
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: ArrayView3<'_, f64>, r: usize) -> Result<Array3<f64>, AdapterError> {
    if r == 0 {
        return Err(AdapterError::ZeroFactor);
    }
    let (c, h, w) = x.dim();
    if c % (r * r) != 0 {
        return Err(AdapterError::Channels { expected: r * r, actual: c });
    }
    Ok(Array3::from_shape_fn((c / (r * r), h * r, w * r), |(ch, y, xx)| {
        x[[ch * r * r + (y % r) * r + xx % r, y / r, xx / r]]
    }))
}

/// Cross-correlation of `C_in × H × W` input with a `C_out × C_in × k × k`
/// kernel, zero padding on every side.
pub fn conv2d(
    x: ArrayView3<'_, f64>,
    kernel: ArrayView4<'_, f64>,
    bias: Option<ArrayView1<'_, f64>>,
    stride: usize,
    padding: usize,
) -> Result<Array3<f64>, AdapterError> {
    if stride == 0 {
        return Err(AdapterError::ZeroStride);
    }
    let (cin, h, w) = x.dim();
    let (cout, kin, kh, kw) = kernel.dim();
    if kin != cin {
        return Err(AdapterError::Channels { expected: kin, actual: cin });
    }
    if let Some(b) = &bias {
        if b.len() != cout {
            return Err(AdapterError::Bias { expected: cout, actual: b.len() });
        }
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(AdapterError::KernelTooLarge { kernel: kh.max(kw), padding, height: h, width: w });
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = Array3::zeros((cout, ho, wo));
    for o in 0..cout {
        let b = bias.as_ref().map_or(0.0, |b| b[o]);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for i in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += kernel[[o, i, ky, kx]] * x[[i, iy as usize, ix as usize]];
                        }
                    }
                }
                out[[o, oy, ox]] = acc;
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// A convolution layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: Array4::zeros((cout, cin, kernel, kernel)),
            bias: Array1::zeros(cout),
            stride,
            padding: kernel / 2,
        }
    }

    /// Uniform in `±scale/√fan_in`, zero bias.
    fn seeded(cin: usize, cout: usize, kernel: usize, stride: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(cin, cout, kernel, stride);
        let bound = scale / ((cin * kernel * kernel) as f64).sqrt();
        if bound > 0.0 {
            layer.weight.mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
        layer
    }

    pub fn forward(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>, AdapterError> {
        conv2d(x, self.weight.view(), Some(self.bias.view()), self.stride, self.padding)
    }
}

/// `x + conv2(relu(conv1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub fn residual_block(x: ArrayView3<'_, f64>, block: &ResidualBlock) -> Result<Array3<f64>, AdapterError> {
    let mut hidden = block.conv1.forward(x)?;
    relu(&mut hidden);
    let branch = block.conv2.forward(hidden.view())?;
    if branch.dim() != x.dim() {
        return Err(AdapterError::ResidualShape {
            input: x.shape().to_vec(),
            output: branch.shape().to_vec(),
        });
    }
    Ok(&x + &branch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Layer layout and initialisation of the adapter. Padding is `kernel / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub downscale: usize,
    pub convs: Vec<ConvSpec>,
    pub residual_blocks: usize,
    pub residual_kernel: usize,
    pub seed: u64,
    /// Multiplies the uniform init bound; `0` gives all-zero weights.
    pub weight_scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            downscale: 4,
            convs: vec![ConvSpec { out_channels: 16, kernel: 3, stride: 2 }],
            residual_blocks: 2,
            residual_kernel: 3,
            seed: 0,
            weight_scale: 1.0,
        }
    }
}

impl AdapterConfig {
    /// `(channels, height, width)` of one frame after the whole stack.
    pub fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize), AdapterError> {
        let r = self.downscale;
        if r == 0 {
            return Err(AdapterError::ZeroFactor);
        }
        if !height.is_multiple_of(r) || !width.is_multiple_of(r) {
            return Err(AdapterError::NotDivisible { factor: r, height, width });
        }
        let (mut c, mut h, mut w) = (6 * r * r, height / r, width / r);
        for spec in &self.convs {
            if spec.stride == 0 {
                return Err(AdapterError::ZeroStride);
            }
            let p = spec.kernel / 2;
            if spec.kernel > h + 2 * p || spec.kernel > w + 2 * p {
                return Err(AdapterError::KernelTooLarge { kernel: spec.kernel, padding: p, height: h, width: w });
            }
            h = (h + 2 * p - spec.kernel) / spec.stride + 1;
            w = (w + 2 * p - spec.kernel) / spec.stride + 1;
            c = spec.out_channels;
        }
        if self.residual_blocks > 0 && self.residual_kernel.is_multiple_of(2) {
            // even kernels with k/2 padding grow the map and break the residual sum
            return Err(AdapterError::ResidualShape {
                input: vec![c, h, w],
                output: vec![c, h + 1, w + 1],
            });
        }
        Ok((c, h, w))
    }

    pub fn output_dim(&self, height: usize, width: usize) -> Result<usize, AdapterError> {
        let (c, h, w) = self.output_shape(height, width)?;
        Ok(c * h * w)
    }
}

/// An adapter with materialised parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraAdapter {
    pub downscale: usize,
    pub convs: Vec<Conv2d>,
    pub blocks: Vec<ResidualBlock>,
}

impl CameraAdapter {
    /// Draws every parameter from a ChaCha8 stream seeded with `cfg.seed`,
    /// in layer order.
    pub fn from_config(cfg: &AdapterConfig) -> Result<Self, AdapterError> {
        if cfg.downscale == 0 {
            return Err(AdapterError::ZeroFactor);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut channels = 6 * cfg.downscale * cfg.downscale;
        let mut convs = Vec::with_capacity(cfg.convs.len());
        for spec in &cfg.convs {
            if spec.stride == 0 {
                return Err(AdapterError::ZeroStride);
            }
            convs.push(Conv2d::seeded(channels, spec.out_channels, spec.kernel, spec.stride, cfg.weight_scale, &mut rng));
            channels = spec.out_channels;
        }
        let k = cfg.residual_kernel;
        let blocks = (0..cfg.residual_blocks)
            .map(|_| ResidualBlock {
                conv1: Conv2d::seeded(channels, channels, k, 1, cfg.weight_scale, &mut rng),
                conv2: Conv2d::seeded(channels, channels, k, 1, cfg.weight_scale, &mut rng),
            })
            .collect();
        Ok(Self { downscale: cfg.downscale, convs, blocks })
    }

    /// Maps one `6 × H × W` frame to a flat feature vector.
    pub fn forward_frame(&self, frame: ArrayView3<'_, f64>) -> Result<Array1<f64>, AdapterError> {
        let mut x = space_to_depth(frame, self.downscale)?;
        let last = self.convs.len().saturating_sub(1);
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(x.view())?;
            if i < last {
                relu(&mut x);
            }
        }
        for block in &self.blocks {
            x = residual_block(x.view(), block)?;
        }
        let n = x.len();
        Ok(x.into_shape_with_order(n).expect("contiguous"))
    }

    /// Embeds every frame, then averages contiguous frame groups so that `L`
    /// frames become `target.0` rows; group `j` covers frames
    /// `[j·L/L', (j+1)·L/L')`.
    pub fn forward(&self, pmap: &PlueckerMap, target: (usize, usize)) -> Result<Array2<f64>, AdapterError> {
        let (frames, latent_frames) = (pmap.num_frames(), target.0);
        if latent_frames == 0 || latent_frames > frames {
            return Err(AdapterError::Temporal { frames, target: latent_frames });
        }
        let per_frame: Vec<Array1<f64>> = (0..frames)
            .map(|i| self.forward_frame(pmap.frame(i)))
            .collect::<Result<_, _>>()?;
        let dim = per_frame[0].len();
        if dim != target.1 {
            return Err(AdapterError::Unreachable { produced: dim, target: target.1 });
        }
        let mut out = Array2::zeros((latent_frames, dim));
        for (j, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (a, b) = (j * frames / latent_frames, (j + 1) * frames / latent_frames);
            for f in &per_frame[a..b] {
                row += f;
            }
            row /= (b - a) as f64;
        }
        Ok(out)
    }
}

/// Projects a Plücker trajectory to a `L' × D` camera embedding.
pub fn camera_adapter(
    pmap: &PlueckerMap,
    cfg: &AdapterConfig,
    target: (usize, usize),
) -> Result<Array2<f64>, AdapterError> {
    let (h, w) = pmap.resolution();
    let produced = cfg.output_dim(h, w)?;
    if produced != target.1 {
        return Err(AdapterError::Unreachable { produced, target: target.1 });
    }
    CameraAdapter::from_config(cfg)?.forward(pmap, target)
}

/// Element-wise `z + cam`.
pub fn inject_camera(z: &LatentSequence, cam: ArrayView2<'_, f64>) -> Result<LatentSequence, AdapterError> {
    if z.shape() != cam.dim() {
        return Err(AdapterError::InjectShape { latent: z.shape(), camera: cam.dim() });
    }
    let sum = Zip::from(z.view()).and(&cam).map_collect(|&a, &b| a + b);
    LatentSequence::new(sum).map_err(|_| AdapterError::InjectShape { latent: z.shape(), camera: cam.dim() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{axis_angle, trajectory_embedding, CameraPose, Extrinsics, Intrinsics, RayConvention, IDENTITY};
    use ndarray::{array, s};

    fn traj(frames: usize, size: usize) -> PlueckerMap {
        let poses: Vec<CameraPose> = (0..frames)
            .map(|i| CameraPose {
                intrinsics: Intrinsics { fx: 20.0, fy: 20.0, cx: size as f64 / 2.0, cy: size as f64 / 2.0 },
                extrinsics: Extrinsics {
                    rotation: axis_angle(&[0.0, 1.0, 0.0], 0.05 * i as f64),
                    translation: [0.1 * i as f64, 0.0, -2.0],
                },
                height: size,
                width: size,
            })
            .collect();
        trajectory_embedding(&poses, RayConvention::Rotated).unwrap()
    }

    #[test]
    fn space_to_depth_block_order() {
        let x = array![[[1.0, 2.0], [3.0, 4.0]]];
        let y = space_to_depth(x.view(), 2).unwrap();
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(space_to_depth(x.view(), 1).unwrap(), x);
        assert_eq!(depth_to_space(y.view(), 2).unwrap(), x);
        let odd = Array3::<f64>::zeros((1, 3, 4));
        assert!(matches!(space_to_depth(odd.view(), 2), Err(AdapterError::NotDivisible { .. })));
    }

    #[test]
    fn space_to_depth_preserves_sum() {
        let x = Array3::from_shape_fn((3, 6, 4), |(c, y, x)| (c * 100 + y * 10 + x) as f64);
        let y = space_to_depth(x.view(), 2).unwrap();
        assert_eq!(y.shape(), &[12, 3, 2]);
        assert_eq!(x.sum(), y.sum());
    }

    #[test]
    fn conv_examples() {
        let x = Array3::from_shape_fn((2, 4, 5), |(c, y, x)| (c + 2 * y + 3 * x) as f64);
        let mut id = Array4::zeros((2, 2, 1, 1));
        id[[0, 0, 0, 0]] = 1.0;
        id[[1, 1, 0, 0]] = 1.0;
        assert_eq!(conv2d(x.view(), id.view(), None, 1, 0).unwrap(), x);
        let ones = Array3::from_elem((1, 3, 3), 1.0);
        let k = Array4::from_elem((1, 1, 3, 3), 1.0);
        let y = conv2d(ones.view(), k.view(), None, 1, 0).unwrap();
        assert_eq!(y, array![[[9.0]]]);
        let zero = Array4::zeros((3, 2, 3, 3));
        let y = conv2d(x.view(), zero.view(), None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[3, 4, 5]);
        assert!(y.iter().all(|&v| v == 0.0));
        // padded corner only sees 4 of the 9 taps
        let y = conv2d(ones.view(), k.view(), None, 1, 1).unwrap();
        assert_eq!(y[[0, 0, 0]], 4.0);
        assert_eq!(y[[0, 1, 1]], 9.0);
        let y = conv2d(Array3::from_elem((1, 5, 5), 1.0).view(), k.view(), None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(matches!(conv2d(x.view(), k.view(), None, 1, 0), Err(AdapterError::Channels { .. })));
    }

    #[test]
    fn residual_examples() {
        let zeros = ResidualBlock { conv1: Conv2d::zeros(3, 3, 3, 1), conv2: Conv2d::zeros(3, 3, 3, 1) };
        let x = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c as f64) - (y * x) as f64);
        assert_eq!(residual_block(x.view(), &zeros).unwrap(), x);

        let mut biased = zeros.clone();
        biased.conv2.bias = array![0.5, -1.0, 2.0];
        let y = residual_block(Array3::zeros((3, 4, 4)).view(), &biased).unwrap();
        for c in 0..3 {
            assert!(y.index_axis(Axis(0), c).iter().all(|&v| v == biased.conv2.bias[c]));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let random = ResidualBlock {
            conv1: Conv2d::seeded(3, 3, 3, 1, 1.0, &mut rng),
            conv2: Conv2d::seeded(3, 3, 3, 1, 1.0, &mut rng),
        };
        assert_eq!(residual_block(x.view(), &random).unwrap().dim(), x.dim());

        let shrinking = ResidualBlock { conv1: Conv2d::zeros(3, 3, 3, 1), conv2: Conv2d::zeros(3, 3, 3, 2) };
        assert!(matches!(residual_block(x.view(), &shrinking), Err(AdapterError::ResidualShape { .. })));
    }

    #[test]
    fn default_config_shape() {
        let cfg = AdapterConfig::default();
        // 32x32 -> 96x8x8 -> conv s2 -> 16x4x4
        assert_eq!(cfg.output_shape(32, 32).unwrap(), (16, 4, 4));
        let emb = camera_adapter(&traj(8, 32), &cfg, (2, 256)).unwrap();
        assert_eq!(emb.dim(), (2, 256));
        assert!(emb.iter().all(|v| v.is_finite()));
        assert!(matches!(
            camera_adapter(&traj(8, 32), &cfg, (2, 255)),
            Err(AdapterError::Unreachable { produced: 256, target: 255 })
        ));
        assert!(matches!(camera_adapter(&traj(2, 32), &cfg, (3, 256)), Err(AdapterError::Temporal { .. })));
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let cfg = AdapterConfig { weight_scale: 0.0, ..AdapterConfig::default() };
        let emb = camera_adapter(&traj(3, 16), &cfg, (3, 64)).unwrap();
        assert!(emb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_and_deterministic() {
        let cfg = AdapterConfig::default();
        let p = traj(4, 16);
        let a = camera_adapter(&p, &cfg, (4, 64)).unwrap();
        assert_eq!(a, camera_adapter(&p, &cfg, (4, 64)).unwrap());
        let other = AdapterConfig { seed: 1, ..cfg };
        assert_ne!(a, camera_adapter(&p, &other, (4, 64)).unwrap());
    }

    #[test]
    fn temporal_grouping_averages() {
        let cfg = AdapterConfig::default();
        let p = traj(4, 16);
        let full = camera_adapter(&p, &cfg, (4, 64)).unwrap();
        let grouped = camera_adapter(&p, &cfg, (2, 64)).unwrap();
        for d in 0..64 {
            let want = (full[[2, d]] + full[[3, d]]) / 2.0;
            assert!((grouped[[1, d]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn injection() {
        let z = LatentSequence::new(Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64)).unwrap();
        let cam = Array2::from_shape_fn((3, 4), |(i, j)| i as f64 - j as f64 * 0.25);
        assert_eq!(inject_camera(&z, Array2::zeros((3, 4)).view()).unwrap(), z);
        assert_eq!(inject_camera(&LatentSequence::zeros(3, 4), cam.view()).unwrap().values(), &cam);
        let back = inject_camera(&inject_camera(&z, cam.view()).unwrap(), (-&cam).view()).unwrap();
        assert_eq!(back, z);
        assert!(matches!(inject_camera(&z, Array2::zeros((2, 4)).view()), Err(AdapterError::InjectShape { .. })));
    }

    #[test]
    fn static_identity_pose_has_zero_moment() {
        let pose = CameraPose {
            intrinsics: Intrinsics::identity(),
            extrinsics: Extrinsics { rotation: IDENTITY, translation: [0.0; 3] },
            height: 4,
            width: 4,
        };
        let map = trajectory_embedding(&[pose; 3], RayConvention::Rotated).unwrap();
        assert!(map.values().slice(s![.., 0..3, .., ..]).iter().all(|&v| v == 0.0));
    }
}
