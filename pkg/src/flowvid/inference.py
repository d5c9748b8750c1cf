"""Synthesis entry points shared by evaluation and the CLI.

Two modes: whole-sequence rollout over in-memory data, and a streaming
variant that reads source frames lazily, keeps only the generator's
sliding window, and yields output frames one at a time, so memory does
not grow with the video length.
"""

import numpy as np
import torch

from .encoder import encode_instance_features
from .generator import one_hot_labels
from .scene import derive_background_mask


def _z_from_vectors(instance_map, vectors, feature_dim):
    """Paint per-instance vectors over an instance map -> (d, H, W)."""
    inst = np.asarray(instance_map)
    out = np.zeros((feature_dim,) + inst.shape, dtype=np.float32)
    for i in np.unique(inst):
        out[:, inst == i] = vectors[int(i)][:, None]
    return torch.from_numpy(out)


def sample_instance_vectors(feature_model, instance_classes, seed):
    """One appearance vector per instance id, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    vectors = {}
    for i in sorted(instance_classes):
        c = int(instance_classes[i])
        if c not in feature_model.per_class:
            raise ValueError(f"no feature model for class {c}")
        vectors[i] = feature_model.per_class[c].sample(rng).astype(np.float32)
    return vectors


def instance_classes_of(labels, instances):
    """Map instance id -> class id (constant per instance by construction)."""
    labels = np.asarray(labels)
    instances = np.asarray(instances)
    mapping = {}
    for i in np.unique(instances):
        pixel_classes = labels[instances == i]
        mapping[int(i)] = int(pixel_classes[0])
    return mapping


def source_features_for_frame(
    model, label_map, instance_map, frame=None, instance_vectors=None
):
    """Per-frame generator input channels: one-hot labels plus, when the
    model is multimodal, an appearance feature map from either the
    encoder (training style, needs the real frame) or sampled vectors.
    """
    cfg = model.config
    oh = one_hot_labels(torch.as_tensor(np.asarray(label_map), dtype=torch.long), cfg.num_classes)
    if not cfg.multimodal_enabled:
        return oh
    if instance_vectors is not None:
        z = _z_from_vectors(instance_map, instance_vectors, cfg.feature_dim)
    elif frame is not None:
        inst = torch.as_tensor(np.asarray(instance_map), dtype=torch.long)
        with torch.no_grad():
            z = encode_instance_features(
                model.encoder, torch.as_tensor(frame).unsqueeze(0), inst.unsqueeze(0)
            )[0]
    else:
        z = torch.zeros(cfg.feature_dim, oh.shape[-2], oh.shape[-1])
    return torch.cat([oh, z], dim=0)


def synthesize_sequence(
    model,
    labels,
    instances,
    feature_model=None,
    feature_seed=0,
    warmup_frames=None,
):
    """Cold-start (or warmup-primed) rollout over an in-memory sequence.

    labels/instances: (T, H, W) arrays. Returns (T, 3, H, W) frames.
    """
    cfg = model.config
    vectors = None
    if cfg.multimodal_enabled:
        if feature_model is None:
            raise ValueError("multimodal model needs a fitted feature model")
        classes = instance_classes_of(labels[0], instances[0])
        vectors = sample_instance_vectors(feature_model, classes, feature_seed)
    feats = torch.stack(
        [
            source_features_for_frame(
                model, labels[t], instances[t], instance_vectors=vectors
            )
            for t in range(len(labels))
        ]
    ).unsqueeze(0)
    bg = None
    if cfg.fg_bg_enabled:
        bg = torch.stack(
            [
                torch.from_numpy(
                    derive_background_mask(labels[t], cfg.background_classes)
                ).unsqueeze(0)
                for t in range(len(labels))
            ]
        ).unsqueeze(0)
    warm = None
    if warmup_frames is not None and len(warmup_frames) > 0:
        warm = torch.as_tensor(np.asarray(warmup_frames)).unsqueeze(0)
    with torch.no_grad():
        result = model.rollout(feats, warmup_frames=warm, bg_masks=bg)
    return result.frames[0]


def stream_synthesize(model, source_reader, num_frames, feature_model=None, feature_seed=0):
    """Yield synthesized frames one at a time with O(window) memory.

    ``source_reader`` provides ``label(t)`` and ``instance(t)``; frames
    are read lazily, one source frame per synthesized output frame.
    """
    cfg = model.config
    L = cfg.window
    vectors = None
    if cfg.multimodal_enabled:
        if feature_model is None:
            raise ValueError("multimodal model needs a fitted feature model")
        lab0 = source_reader.label(0)
        inst0 = source_reader.instance(0)
        classes = instance_classes_of(lab0, inst0)
        vectors = sample_instance_vectors(feature_model, classes, feature_seed)

    def feats_at(t):
        lab = source_reader.label(t)
        inst = source_reader.instance(t)
        f = source_features_for_frame(model, lab, inst, instance_vectors=vectors)
        bg = None
        if cfg.fg_bg_enabled:
            bg = torch.from_numpy(
                derive_background_mask(lab, cfg.background_classes)
            ).unsqueeze(0)
        return f, bg

    source_window = []
    frame_window = None
    with torch.no_grad():
        for t in range(num_frames):
            f, bg = feats_at(t)
            source_window.append(f)
            if len(source_window) > L + 1:
                source_window.pop(0)
            src = [source_window[0]] * (L + 1 - len(source_window)) + source_window
            src_t = torch.stack(src).unsqueeze(0)
            bg_t = bg.unsqueeze(0) if bg is not None else None
            if t == 0:
                h, w = f.shape[-2:]
                zeros = torch.zeros(1, L, 3, h, w)
                out = model.step(
                    src_t,
                    zeros,
                    bg_mask=bg_t,
                    mask_override=1.0 if cfg.warp_enabled else None,
                )
                frame_window = [out["frame"]] * L
            else:
                out = model.step(src_t, torch.stack(frame_window, dim=1), bg_mask=bg_t)
                frame_window = frame_window[1:] + [out["frame"]]
            yield out["frame"][0]
