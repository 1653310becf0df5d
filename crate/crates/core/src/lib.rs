//! Octree high-resolution network with multiresolution instance
//! discrimination pretraining, downstream probes and registration.

pub mod autodiff;
pub mod batch;
pub mod datagen;
pub mod downstream;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod midloss;
pub mod network;
pub mod octree;
pub mod registration;
pub mod seed;
pub mod spatial;
pub mod tensor;
pub mod trainer;

/// Any error raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
    #[error(transparent)]
    Octree(#[from] octree::OctreeError),
    #[error(transparent)]
    Batch(#[from] batch::BatchError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Net(#[from] network::NetError),
    #[error(transparent)]
    Mid(#[from] midloss::MidError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Downstream(#[from] downstream::DownstreamError),
    #[error(transparent)]
    Registration(#[from] registration::RegistrationError),
    #[error(transparent)]
    Datagen(#[from] datagen::DatagenError),
}

impl Error {
    /// Whether the error stems from invalid user input or configuration
    /// rather than a failure during computation.
    pub fn is_validation(&self) -> bool {
        use downstream::DownstreamError as D;
        use trainer::TrainError as T;
        match self {
            Error::Net(network::NetError::InvalidConfig(_)) => true,
            Error::Io(_) | Error::Datagen(_) => true,
            Error::Train(T::InvalidConfig(_) | T::InvalidData(_) | T::ConfigMismatch { .. } | T::Checkpoint(_) | T::Io(_)) => true,
            Error::Train(T::Net(network::NetError::InvalidConfig(_))) => true,
            Error::Downstream(D::InvalidConfig(_) | D::LabelRange { .. } | D::MissingPartLabels(_) | D::EmptyInput | D::Io(_) | D::Report { .. }) => true,
            Error::Downstream(D::Train(T::ConfigMismatch { .. })) => true,
            _ => false,
        }
    }
}
