use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor math, training, quantization and the harness.
#[derive(Debug)]
pub enum Error {
    /// Two shapes that must broadcast or compose do not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A tensor constructor received data whose length does not match its shape.
    DataLength { expected: usize, got: usize },
    /// An operation produced or received a NaN/Inf where finite values are required.
    NonFinite { op: &'static str },
    /// Elementwise division with a zero divisor element.
    DivisionByZero,
    /// A reduction over zero elements.
    EmptyReduction { op: &'static str },
    /// Invalid reduction axis for the given rank.
    InvalidAxis { axis: usize, rank: usize },
    /// Convolution kernel does not fit inside the (padded) input.
    KernelTooLarge {
        kernel: (usize, usize),
        input: (usize, usize),
    },
    /// A class label outside [0, num_classes).
    LabelOutOfRange { label: usize, num_classes: usize },
    /// Integer accumulator left the int-32 range (reported, then widened).
    AccumulatorOverflow { layer: String },
    /// Training diverged or failed to reach a required target.
    Train(String),
    /// A persisted artifact is malformed (magic/version/digest mismatch, truncation).
    Format(String),
    /// Invalid experiment configuration.
    Config(String),
    /// Dataset construction ran out of samples for a class.
    ClassExhausted { class: usize, needed: usize, available: usize },
    /// Trigger footprint does not fit inside the image.
    TriggerTooLarge { trigger: usize, image: (usize, usize) },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite value produced"),
            Error::DivisionByZero => write!(f, "elementwise division by zero"),
            Error::EmptyReduction { op } => write!(f, "{op}: reduction over empty slice"),
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Error::KernelTooLarge { kernel, input } => write!(
                f,
                "kernel {}x{} larger than padded input {}x{}",
                kernel.0, kernel.1, input.0, input.1
            ),
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Error::AccumulatorOverflow { layer } => {
                write!(f, "int32 accumulator overflow in layer {layer}; widened to int64")
            }
            Error::Train(msg) => write!(f, "training failure: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::ClassExhausted { class, needed, available } => write!(
                f,
                "class {class} exhausted: needed {needed} samples, have {available}"
            ),
            Error::TriggerTooLarge { trigger, image } => write!(
                f,
                "trigger {}x{} does not fit in {}x{} image",
                trigger, trigger, image.0, image.1
            ),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
