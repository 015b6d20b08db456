//! Image-space and label-space primitives.
//!
//! A [`Volume`] is a dense scalar intensity grid (2D or 3D) with voxel spacing
//! metadata; a [`LabelMap`] assigns each voxel a class in `{0..K}` where 0 is
//! background; a [`TemplateBundle`] couples a template volume with its K
//! per-class foreground volumes and its label map, which is the input the
//! template-encoder consumes.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::FeatureMap;

/// Dense scalar intensity grid, rank 2 or 3, with per-axis voxel size in mm.
/// Spacing is informational and carried through I/O.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: ArrayD<f64>,
    spacing: Vec<f64>,
}

impl Volume {
    /// Builds a volume with unit spacing. Entries must be finite and the rank
    /// must be 2 or 3 with every extent at least 1.
    pub fn new(data: ArrayD<f64>) -> Result<Self> {
        let spacing = vec![1.0; data.ndim()];
        Self::with_spacing(data, spacing)
    }

    pub fn with_spacing(data: ArrayD<f64>, spacing: Vec<f64>) -> Result<Self> {
        if data.ndim() != 2 && data.ndim() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "volume rank must be 2 or 3, got {}",
                data.ndim()
            )));
        }
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "volume extents must be >= 1, got {:?}",
                data.shape()
            )));
        }
        if spacing.len() != data.ndim() {
            return Err(Error::ShapeMismatch(format!(
                "spacing has {} entries for a rank-{} volume",
                spacing.len(),
                data.ndim()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("volume contains non-finite values".into()));
        }
        let data = to_standard(data);
        Ok(Self { data, spacing })
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn ndim(&self) -> usize {
        self.data.ndim()
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    /// Contiguous C-order view of the voxel data.
    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("volume data is standard layout")
    }
}

/// Integer class grid paired with a volume; entries lie in `{0..K}` with 0 as
/// background and `num_classes = K >= 1` foreground classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    data: ArrayD<u8>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(data: ArrayD<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidLabelMap(
                "num_classes must be >= 1".into(),
            ));
        }
        if data.ndim() != 2 && data.ndim() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "label map rank must be 2 or 3, got {}",
                data.ndim()
            )));
        }
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "label map extents must be >= 1, got {:?}",
                data.shape()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize > num_classes) {
            return Err(Error::InvalidLabelMap(format!(
                "label {bad} exceeds num_classes {num_classes}"
            )));
        }
        let data = to_standard(data);
        Ok(Self { data, num_classes })
    }

    /// Re-tags the map with a larger class count (useful after I/O, where K is
    /// recovered from the data and may undercount absent classes).
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        Self::new(self.data, num_classes)
    }

    pub fn data(&self) -> &ArrayD<u8> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn ndim(&self) -> usize {
        self.data.ndim()
    }

    pub fn as_slice(&self) -> &[u8] {
        self.data.as_slice().expect("label data is standard layout")
    }

    /// Centered sub-grid with the same floor rule as [`center_crop`].
    pub fn center_crop(&self, dims: &[usize]) -> Result<LabelMap> {
        let data = crop_array(&self.data, dims)?;
        LabelMap::new(data, self.num_classes)
    }
}

/// Template volume plus its per-class foreground volumes and label map.
///
/// Channel `c` equals the template wherever the label is `c + 1` and is zero
/// elsewhere, so the nonzero supports of the channels are pairwise disjoint.
#[derive(Debug, Clone)]
pub struct TemplateBundle {
    pub template: Volume,
    pub foreground_channels: Vec<Volume>,
    pub labels: LabelMap,
}

impl TemplateBundle {
    /// Validates the bundle invariants and constructs the bundle.
    pub fn new(
        template: Volume,
        foreground_channels: Vec<Volume>,
        labels: LabelMap,
    ) -> Result<Self> {
        if foreground_channels.len() != labels.num_classes() {
            return Err(Error::InvalidLabelMap(format!(
                "bundle has {} channels for {} classes",
                foreground_channels.len(),
                labels.num_classes()
            )));
        }
        if labels.shape() != template.shape() {
            return Err(Error::ShapeMismatch(format!(
                "labels {:?} vs template {:?}",
                labels.shape(),
                template.shape()
            )));
        }
        let timg = template.as_slice();
        let lab = labels.as_slice();
        for (c, ch) in foreground_channels.iter().enumerate() {
            if ch.shape() != template.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "channel {c} shape {:?} vs template {:?}",
                    ch.shape(),
                    template.shape()
                )));
            }
            let cs = ch.as_slice();
            let class = (c + 1) as u8;
            for i in 0..cs.len() {
                let want = if lab[i] == class { timg[i] } else { 0.0 };
                if cs[i] != want {
                    return Err(Error::InvalidLabelMap(format!(
                        "channel {c} violates the masking invariant at flat index {i}"
                    )));
                }
            }
        }
        Ok(Self {
            template,
            foreground_channels,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    pub fn shape(&self) -> &[usize] {
        self.template.shape()
    }
}

/// Clamps every voxel to `[lo, hi]` (Hounsfield-style intensity truncation).
pub fn truncate_intensity(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidRange { lo, hi });
    }
    let data = v.data.mapv(|x| x.clamp(lo, hi));
    Volume::with_spacing(data, v.spacing.clone())
}

/// Shifts and scales to zero mean and unit population standard deviation.
pub fn normalize_zscore(v: &Volume) -> Result<Volume> {
    let n = v.num_voxels();
    if n < 2 {
        return Err(Error::DegenerateInput(
            "normalization needs at least 2 voxels".into(),
        ));
    }
    let s = v.as_slice();
    let mean = crate::par::sum_chunked(s) / n as f64;
    let sq: f64 = crate::par::chunk_partials(n, crate::par::REDUCE_CHUNK, |r| {
        s[r].iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
    })
    .into_iter()
    .sum();
    let var = sq / n as f64;
    if var < 1e-24 {
        return Err(Error::DegenerateInput(
            "constant volume cannot be normalized".into(),
        ));
    }
    let inv_std = 1.0 / var.sqrt();
    let data = v.data.mapv(|x| (x - mean) * inv_std);
    Volume::with_spacing(data, v.spacing.clone())
}

/// Centered sub-grid of the requested extents; the offset along each axis is
/// `floor((in - out) / 2)`.
pub fn center_crop(v: &Volume, dims: &[usize]) -> Result<Volume> {
    let data = crop_array(&v.data, dims)?;
    Volume::with_spacing(data, v.spacing.clone())
}

fn crop_array<T: Clone>(a: &ArrayD<T>, dims: &[usize]) -> Result<ArrayD<T>> {
    if dims.len() != a.ndim() {
        return Err(Error::ShapeMismatch(format!(
            "crop rank {} vs volume rank {}",
            dims.len(),
            a.ndim()
        )));
    }
    for (axis, (&want, &have)) in dims.iter().zip(a.shape()).enumerate() {
        if want == 0 || want > have {
            return Err(Error::OutOfBounds(format!(
                "axis {axis}: requested {want} from extent {have}"
            )));
        }
    }
    let mut view = a.view();
    for (axis, (&want, &have)) in dims.iter().zip(a.shape().to_vec().iter()).enumerate() {
        let off = (have - want) / 2;
        view.slice_axis_inplace(
            ndarray::Axis(axis),
            ndarray::Slice::from(off..off + want),
        );
    }
    Ok(view.to_owned())
}

/// Masks the image once per foreground class: channel `c` preserves the image
/// wherever `labels == c + 1` and is zero elsewhere. The template image itself
/// rides along in the bundle so spatial correlations between classes survive.
pub fn extract_foreground_regions(img: &Volume, labels: &LabelMap) -> Result<TemplateBundle> {
    if img.shape() != labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs labels {:?}",
            img.shape(),
            labels.shape()
        )));
    }
    let src = img.as_slice();
    let lab = labels.as_slice();
    let mut channels = Vec::with_capacity(labels.num_classes());
    for c in 0..labels.num_classes() {
        let class = (c + 1) as u8;
        let mut data = vec![0.0; src.len()];
        for i in 0..src.len() {
            if lab[i] == class {
                data[i] = src[i];
            }
        }
        let arr = ArrayD::from_shape_vec(IxDyn(img.shape()), data)
            .expect("shape matches data length");
        channels.push(Volume::with_spacing(arr, img.spacing().to_vec())?);
    }
    Ok(TemplateBundle {
        template: img.clone(),
        foreground_channels: channels,
        labels: labels.clone(),
    })
}

/// One-hot encoding over `K + 1` channels, channel 0 being background. Output
/// layout is `(H, W, D, K + 1)`; 2D label maps get a singleton depth axis.
pub fn one_hot_encode(labels: &LabelMap) -> FeatureMap {
    let (h, w, d) = spatial_extents(labels.shape());
    let channels = labels.num_classes() + 1;
    let lab = labels.as_slice();
    let mut out = FeatureMap::zeros((h, w, d, channels));
    let os = out.as_slice_mut().expect("standard layout");
    for (i, &l) in lab.iter().enumerate() {
        os[i * channels + l as usize] = 1.0;
    }
    out
}

/// Returns `(H, W, D)` for a rank-2 or rank-3 spatial shape, padding a rank-2
/// shape with a singleton depth axis.
pub fn spatial_extents(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [h, w] => (*h, *w, 1),
        [h, w, d] => (*h, *w, *d),
        other => panic!("spatial shape must be rank 2 or 3, got {other:?}"),
    }
}

fn to_standard<T: Clone>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}
