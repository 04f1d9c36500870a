"""Signal preprocessing, peak detection, synthetic pairs and datasets."""

from .dataset import (
    AF,
    NON_AF,
    UNLABELED,
    PairedDataset,
    load_dataset,
    mask_labels,
    read_manifest,
    save_dataset,
    split_by_patient,
    synthesize_dataset,
)
from .peaks import detect_peaks, detect_peaks_ecg, detect_peaks_ppg, peak_only_encode, rmssd
from .signals import (
    CANONICAL_LENGTH,
    CANONICAL_RATE,
    ECG,
    PPG,
    PairedSample,
    SignalSegment,
    assess_quality,
    pad_wrap,
    read_waveform_csv,
    resample,
    slice_segments,
)
from .synth import SynthPatientParams, synthesize_cohort, synthesize_pair
