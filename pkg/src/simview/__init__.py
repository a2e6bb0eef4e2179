"""Instance retrieval with multi-view SimSiam fine-tuning on semantic-map pseudo-labels."""

from .data import (
    BBox,
    MultiViewDataset,
    ObservationImage,
    OccupancyGrid,
    crop_square,
    exploration_points,
    generate_synthetic_multiview,
    load_directory_dataset,
    mask_to_bbox,
    split_dataset,
    write_directory_dataset,
)
from .encoder import (
    EncoderConfig,
    EncoderModel,
    augment_pair,
    build_encoder,
    embed_images,
    encode,
    forward_training,
    load_checkpoint,
    preprocess,
    save_checkpoint,
)
from .evaluation import ClusterReport, EvalReport, ari, error_breakdown, evaluate_map, kmeans, pca_project, representation_score
from .registry import FeatureStore, InstanceRecord, build_store, load_store, register_observation, save_store
from .retrieval import RetrievalResult, cosine_similarity, instance_max_similarity, retrieve, retrieve_vector, top_k_neighbors
from .trainer import TrainConfig, TrainReport, cosine_lr, freeze_partial, simview_loss, train

__version__ = "0.1.0"
