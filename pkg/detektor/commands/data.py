from __future__ import annotations

import argparse
import logging
from collections import Counter
from typing import Dict, List, Mapping, Optional

from ..config import RunConfig, normalize_path
from ..errors import EXIT_DATA_ERROR, EXIT_OK, ConfigurationError, DetektorError
from ..models import LABEL_FAKE, LABEL_REAL, SPLITS, AlignmentMode, SampleDescriptor
from ..services.dataset import count_by_split_and_label, frame_path, index_dataset, landmark_file_path, mask_path
from ..services.synthetic import synth_generate
from ..services.tubelet import import_landmark_file, load_tubelet
from ..storage import is_cache_current, source_fingerprint, write_cached_tubelet, write_failed_windows

logger = logging.getLogger(__name__)


def cmd_synth(config: RunConfig, args: argparse.Namespace) -> int:
    root = synth_generate(config.dataset.synth, normalize_path(args.out))
    print(f"Synthetischer Datensatz geschrieben: {root}")
    return EXIT_OK


def _source_files(root, descriptor: SampleDescriptor, mode: AlignmentMode) -> List:
    files = [frame_path(root, descriptor.label, descriptor.video_id, idx) for idx in descriptor.frame_indices]
    if mode is AlignmentMode.MASK_BBOX:
        files.extend(mask_path(root, descriptor.video_id, idx) for idx in descriptor.frame_indices)
    elif mode is AlignmentMode.LANDMARK:
        files.append(landmark_file_path(root))
    return files


def format_counts(counts: Mapping[str, Mapping[int, int]]) -> str:
    lines = ["split  real  fake"]
    for split in SPLITS:
        lines.append(f"{split:<5} {counts[split][LABEL_REAL]:>5} {counts[split][LABEL_FAKE]:>5}")
    return "\n".join(lines)


def preprocess_dataset(config: RunConfig) -> Dict[str, object]:
    """Baut und cached alle Tubelets; unveränderte Einträge werden übersprungen.

    Returns:
        {"descriptors", "written", "skipped", "failed_videos", "counts", "cache_dir"}
    """
    ds = config.dataset
    if not ds.root:
        raise ConfigurationError("dataset.root muss für preprocess gesetzt sein.")
    root = normalize_path(ds.root)
    mode = AlignmentMode.from_config(ds.mode)
    cache_dir = ds.resolved_cache_dir()
    descriptors = index_dataset(
        root,
        ds.sequence_length,
        ds.resolved_stride(),
        default_manipulation=ds.default_manipulation,
    )

    landmarks: Optional[Mapping] = None
    if mode is AlignmentMode.LANDMARK:
        landmarks, stats = import_landmark_file(landmark_file_path(root))
        logger.info("Landmarken: %s von %s Zeilen importiert.", stats["imported"], stats["processed"])

    written = skipped = 0
    failures: Counter = Counter()
    failed_windows: List[str] = []
    usable: List[SampleDescriptor] = []
    for descriptor in descriptors:
        fingerprint = source_fingerprint(
            descriptor,
            mode=mode.value,
            crop_size=ds.crop_size,
            margin=ds.mask_margin,
            source_files=_source_files(root, descriptor, mode),
        )
        if is_cache_current(cache_dir, descriptor, fingerprint):
            skipped += 1
            usable.append(descriptor)
            continue
        try:
            tubelet = load_tubelet(
                root,
                descriptor,
                mode,
                landmarks=landmarks,
                crop_size=ds.crop_size,
                margin=ds.mask_margin,
            )
        except DetektorError as exc:
            failures[descriptor.video_id] += 1
            failed_windows.append(descriptor.sample_id)
            logger.warning("Fenster %s übersprungen: %s", descriptor.sample_id, exc)
            continue
        write_cached_tubelet(cache_dir, descriptor, tubelet, fingerprint=fingerprint)
        written += 1
        usable.append(descriptor)

    write_failed_windows(cache_dir, failed_windows)
    if failures:
        logger.warning(
            "%s Videos mit fehlerhaften Fenstern (%s Fenster insgesamt), z.B. %s.",
            len(failures),
            sum(failures.values()),
            sorted(failures)[:5],
        )
    logger.info("Preprocess: %s geschrieben, %s unverändert, Cache %s.", written, skipped, cache_dir)
    return {
        "descriptors": usable,
        "written": written,
        "skipped": skipped,
        "failed_videos": dict(failures),
        "counts": count_by_split_and_label(usable),
        "cache_dir": cache_dir,
    }


def cmd_preprocess(config: RunConfig, args: argparse.Namespace) -> int:
    result = preprocess_dataset(config)
    counts = result["counts"]
    print(format_counts(counts))
    print(f"Cache: {result['cache_dir']} ({result['written']} neu, {result['skipped']} unverändert)")
    empty = [split for split in SPLITS if sum(counts[split].values()) == 0]
    if empty:
        logger.error("Leere Splits nach preprocess: %s", ", ".join(empty))
        return EXIT_DATA_ERROR
    return EXIT_OK
