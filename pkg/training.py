"""
Training - Corpus sintetico di speaker e loop di training desk-scale.

Gestisce:
- Speaker sintetici: sorgente armonica con contorno di f0 e jitter,
  filtrata da risonanze formantiche, più rumore a -40 dB
- Slice training: finestra casuale contigua di al più `segment_frames` frame
- Obiettivo proxy: cross-entropy di una testa lineare sugli speaker
  (+ termine contrastivo coseno opzionale), AdamW con lr per epoca
- Valutazione: accuratezza nearest-centroid e gap di similarità coseno
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import lfilter

from analysis import same_different_similarity
from config import MelConfig, TrainConfig
from features import AudioClip, MelSpectrogram, extract_features, load_wav, save_wav
from numerics import NumericalError, Parameter, adamw_step, init_matrix, lr_at_epoch
from rsm_core import ResidualSpeakerModule
from storage import MetricsLog, write_json

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
MAX_HARMONICS = 40
HARMONIC_CEILING_HZ = 7800.0
NOISE_DB = -40.0
OUTPUT_PEAK = 0.5
CORPUS_MANIFEST = "corpus.json"
CORPUS_VERSION = 1


class CorpusError(ValueError):
    """Corpus insufficiente o malformato."""


class TrainingAborted(RuntimeError):
    """Loss non finita: training interrotto."""

    def __init__(self, step: int, parameter_norms: Dict[str, float], reason: str = "loss non finita") -> None:
        worst = sorted(parameter_norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)
        summary = ", ".join(f"{name}={norm:.4g}" for name, norm in worst[:5])
        super().__init__(f"{reason} allo step {step}; norme parametri: {summary}")
        self.step = step
        self.parameter_norms = parameter_norms


@dataclass
class SyntheticSpeaker:
    speaker_id: str
    f0_range: Tuple[float, float]
    formant_centers: Tuple[float, float, float]
    formant_bandwidths: Tuple[float, float, float]
    harmonic_tilt: float
    jitter: float

    def validate(self) -> List[str]:
        """Valida lo speaker e restituisce lista di errori."""
        errors = []
        lo, hi = self.f0_range
        if not (60.0 <= lo < hi <= 400.0):
            errors.append(f"f0_range {self.f0_range} deve stare in [60, 400] Hz")
        centers = list(self.formant_centers)
        if len(centers) != 3 or centers != sorted(centers) or centers[-1] >= 8000.0:
            errors.append(f"formanti {self.formant_centers} devono essere 3, crescenti, < 8000 Hz")
        if any(b <= 0 for b in self.formant_bandwidths):
            errors.append("le bande formantiche devono essere > 0")
        if self.jitter < 0:
            errors.append("jitter deve essere >= 0")
        return errors

    @classmethod
    def sample(cls, rng: np.random.Generator, speaker_id: str) -> "SyntheticSpeaker":
        """Estrae uno speaker casuale con parametri plausibili."""
        lo = float(rng.uniform(70.0, 250.0))
        hi = float(min(400.0, lo + rng.uniform(20.0, 60.0)))
        f1 = float(rng.uniform(300.0, 900.0))
        f2 = float(rng.uniform(max(900.0, f1 + 200.0), 2500.0))
        f3 = float(rng.uniform(max(2300.0, f2 + 200.0), 3500.0))
        return cls(
            speaker_id=speaker_id,
            f0_range=(lo, hi),
            formant_centers=(f1, f2, f3),
            formant_bandwidths=(
                float(rng.uniform(60.0, 150.0)),
                float(rng.uniform(80.0, 200.0)),
                float(rng.uniform(100.0, 300.0)),
            ),
            harmonic_tilt=float(rng.uniform(-15.0, -6.0)),
            jitter=float(rng.uniform(0.002, 0.02)),
        )


@dataclass
class Corpus:
    clips: List[AudioClip]
    labels: List[int]
    utterance_ids: List[str]
    speakers: Dict[int, SyntheticSpeaker] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clips)

    def speaker_labels(self) -> List[int]:
        return sorted(set(self.labels))


@dataclass
class ClassificationHead:
    """Testa lineare E → logit degli speaker (non salvata nel checkpoint)."""

    weight: Parameter
    bias: Parameter

    @classmethod
    def create(cls, d_s: int, num_classes: int, rng: np.random.Generator) -> "ClassificationHead":
        return cls(
            weight=Parameter("head.weight", init_matrix(rng, (d_s, num_classes), d_s)),
            bias=Parameter("head.bias", np.zeros((1, num_classes))),
        )

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


@dataclass
class TrainResult:
    model: ResidualSpeakerModule
    head: ClassificationHead
    metrics: List[Dict]
    class_labels: List[int]

    @property
    def initial_loss(self) -> float:
        return float(self.metrics[0]["loss"])

    @property
    def final_loss(self) -> float:
        return float(self.metrics[-1]["loss"])


@dataclass
class EvaluationReport:
    accuracy: float
    num_speakers: int
    num_utterances: int
    same_similarity: float
    different_similarity: float
    similarity_gap: float
    weight_same_similarity: float
    weight_different_similarity: float
    weight_similarity_gap: float

    def to_dict(self) -> Dict:
        return asdict(self)


# =====================
# Corpus sintetico
# =====================


def _resonator(signal: np.ndarray, center: float, bandwidth: float, sample_rate: int) -> np.ndarray:
    """Risonatore a due poli con guadagno unitario in continua."""
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2.0 * np.pi * center / sample_rate
    b_coef = 2.0 * r * np.cos(theta)
    c_coef = -r * r
    return lfilter([1.0 - b_coef - c_coef], [1.0, -b_coef, -c_coef], signal)


def synthesize_utterance(
    speaker: SyntheticSpeaker,
    duration: float,
    rng: np.random.Generator,
    sample_rate: int = SAMPLE_RATE,
) -> AudioClip:
    """
    Un'utterance: pila armonica su contorno di f0 con jitter, formanti
    (leggermente perturbate per variare il "contenuto"), inviluppo sillabico
    e rumore a -40 dB.
    """
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    lo, hi = speaker.f0_range

    start, end = rng.uniform(lo, hi, size=2)
    contour = np.linspace(start, end, n)
    wobble = lfilter([0.01], [1.0, -0.99], rng.standard_normal(n))
    wobble /= max(float(np.std(wobble)), 1e-12)
    f0 = np.clip(contour * (1.0 + speaker.jitter * wobble), lo, hi)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    n_harmonics = max(1, min(MAX_HARMONICS, int(HARMONIC_CEILING_HZ // hi)))
    source = np.zeros(n)
    for h in range(1, n_harmonics + 1):
        amplitude = 10.0 ** (speaker.harmonic_tilt * np.log2(h) / 20.0)
        source += amplitude * np.sin(h * phase)

    rate = rng.uniform(2.0, 6.0)
    depth = rng.uniform(0.3, 0.8)
    envelope = 1.0 - depth * 0.5 * (1.0 - np.cos(2.0 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    voiced = source * envelope

    shifts = rng.uniform(0.95, 1.05, size=3)
    for center, bandwidth, shift in zip(speaker.formant_centers, speaker.formant_bandwidths, shifts):
        voiced = _resonator(voiced, center * shift, bandwidth, sample_rate)

    rms = float(np.sqrt(np.mean(voiced * voiced))) if n else 0.0
    noise = rng.standard_normal(n) * rms * 10.0 ** (NOISE_DB / 20.0)
    signal = voiced + noise

    peak = float(np.max(np.abs(signal))) if n else 0.0
    if peak > 0:
        signal = signal * (OUTPUT_PEAK / peak)
    return AudioClip(signal, sample_rate)


def gen_corpus(
    seed: int,
    num_speakers: int,
    utterances_per_speaker: int,
    duration_range: Tuple[float, float] = (1.0, 3.0),
    speaker_offset: int = 0,
    speakers: Optional[Sequence[SyntheticSpeaker]] = None,
) -> Corpus:
    """
    Genera un corpus deterministico dato il seed.

    Ogni speaker e ogni utterance hanno un generatore proprio, quindi
    aggiungere utterance o speaker non cambia quelle già generate.

    Args:
        seed: Seed globale
        num_speakers: Numero di speaker (>= 2)
        utterances_per_speaker: Utterance per speaker
        duration_range: (min, max) in secondi
        speaker_offset: Indice del primo speaker (per speaker "non visti")
        speakers: Speaker espliciti al posto di quelli campionati
    """
    lo, hi = duration_range
    if num_speakers < 2:
        raise CorpusError(f"servono almeno 2 speaker, richiesti {num_speakers}")
    if utterances_per_speaker < 1:
        raise CorpusError("utterances_per_speaker deve essere >= 1")
    if not (0.0 < lo <= hi):
        raise CorpusError(f"duration_range non valido: {duration_range}")
    if speakers is not None and len(speakers) != num_speakers:
        raise CorpusError("numero di speaker espliciti diverso da num_speakers")

    corpus = Corpus(clips=[], labels=[], utterance_ids=[])
    for s in range(num_speakers):
        label = speaker_offset + s
        if speakers is not None:
            speaker = speakers[s]
        else:
            speaker = SyntheticSpeaker.sample(np.random.default_rng([seed, 0, label]), f"spk{label:03d}")
        errors = speaker.validate()
        if errors:
            raise CorpusError(f"{speaker.speaker_id}: {errors[0]}")
        corpus.speakers[label] = speaker

        for u in range(utterances_per_speaker):
            rng = np.random.default_rng([seed, 1, label, u])
            duration = float(rng.uniform(lo, hi)) if hi > lo else lo
            corpus.clips.append(synthesize_utterance(speaker, duration, rng))
            corpus.labels.append(label)
            corpus.utterance_ids.append(f"{speaker.speaker_id}_utt{u:03d}")

    logger.info(f"Corpus generato: {num_speakers} speaker x {utterances_per_speaker} utterance (seed {seed})")
    return corpus


def split_corpus(corpus: Corpus, heldout_per_speaker: int) -> Tuple[Corpus, Corpus]:
    """Separa le ultime `heldout_per_speaker` utterance di ogni speaker."""
    train = Corpus([], [], [], dict(corpus.speakers))
    heldout = Corpus([], [], [], dict(corpus.speakers))
    for label in corpus.speaker_labels():
        indices = [i for i, l in enumerate(corpus.labels) if l == label]
        if len(indices) <= heldout_per_speaker:
            raise CorpusError(f"speaker {label}: {len(indices)} utterance, impossibile tenerne {heldout_per_speaker}")
        cut = len(indices) - heldout_per_speaker
        for position, i in enumerate(indices):
            target = train if position < cut else heldout
            target.clips.append(corpus.clips[i])
            target.labels.append(label)
            target.utterance_ids.append(corpus.utterance_ids[i])
    return train, heldout


def save_corpus(corpus: Corpus, directory: Union[str, Path], seed: Optional[int] = None) -> Path:
    """Salva i WAV (una cartella per speaker) e il manifest corpus.json."""
    root = Path(directory)
    entries = []
    for clip, label, utt_id in zip(corpus.clips, corpus.labels, corpus.utterance_ids):
        speaker = corpus.speakers.get(label)
        folder = speaker.speaker_id if speaker else f"spk{label:03d}"
        relative = Path(folder) / f"{utt_id}.wav"
        save_wav(root / relative, clip)
        entries.append({"path": relative.as_posix(), "label": label, "id": utt_id})

    manifest = {
        "version": CORPUS_VERSION,
        "seed": seed,
        "sample_rate": SAMPLE_RATE,
        "speakers": {str(k): asdict(v) for k, v in sorted(corpus.speakers.items())},
        "utterances": entries,
    }
    write_json(root / CORPUS_MANIFEST, manifest)
    logger.info(f"Corpus salvato in {root} ({len(entries)} file)")
    return root


def load_corpus(directory: Union[str, Path]) -> Corpus:
    """Carica un corpus salvato da `save_corpus`."""
    root = Path(directory)
    manifest_path = root / CORPUS_MANIFEST
    if not manifest_path.is_file():
        raise CorpusError(f"{root}: manca {CORPUS_MANIFEST}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)

    speakers = {}
    for key, data in manifest.get("speakers", {}).items():
        speakers[int(key)] = SyntheticSpeaker(
            speaker_id=data["speaker_id"],
            f0_range=tuple(data["f0_range"]),
            formant_centers=tuple(data["formant_centers"]),
            formant_bandwidths=tuple(data["formant_bandwidths"]),
            harmonic_tilt=float(data["harmonic_tilt"]),
            jitter=float(data["jitter"]),
        )
    corpus = Corpus([], [], [], speakers)
    for entry in manifest["utterances"]:
        corpus.clips.append(load_wav(root / entry["path"]))
        corpus.labels.append(int(entry["label"]))
        corpus.utterance_ids.append(entry["id"])
    return corpus


# =====================
# Slice training
# =====================


def slice_segment(mel: MelSpectrogram, segment_frames: int, rng: np.random.Generator) -> MelSpectrogram:
    """Finestra contigua casuale di min(T, segment_frames) frame."""
    total = mel.num_frames
    if total <= segment_frames:
        return mel
    start = int(rng.integers(0, total - segment_frames + 1))
    return MelSpectrogram(frames=mel.frames[start: start + segment_frames], config=mel.config)


# =====================
# Loss
# =====================


def classification_loss(
    embeddings: np.ndarray, targets: np.ndarray, head: ClassificationHead
) -> Tuple[float, np.ndarray, Dict[str, np.ndarray]]:
    """
    Cross-entropy media della testa lineare.

    Returns:
        (loss, gradiente rispetto agli embedding, gradienti della testa)
    """
    batch = embeddings.shape[0]
    logits = embeddings @ head.weight.value + head.bias.value
    logits = logits - logits.max(axis=1, keepdims=True)
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    loss = -float(np.mean(log_probs[np.arange(batch), targets]))

    g_logits = np.exp(log_probs)
    g_logits[np.arange(batch), targets] -= 1.0
    g_logits /= batch
    grads = {
        "weight": embeddings.T @ g_logits,
        "bias": g_logits.sum(axis=0, keepdims=True),
    }
    return loss, g_logits @ head.weight.value.T, grads


def contrastive_loss(
    embeddings: np.ndarray, targets: np.ndarray, margin: float
) -> Tuple[float, np.ndarray]:
    """
    mean_same(1 - cos) + mean_diff(max(0, cos - margin)) sulle coppie del batch.
    """
    norms = np.maximum(np.linalg.norm(embeddings, axis=1), 1e-12)
    unit = embeddings / norms[:, np.newaxis]
    cosine = unit @ unit.T

    upper = np.triu(np.ones_like(cosine, dtype=bool), k=1)
    same = (targets[:, np.newaxis] == targets[np.newaxis, :]) & upper
    diff = (targets[:, np.newaxis] != targets[np.newaxis, :]) & upper

    loss = 0.0
    g_cos = np.zeros_like(cosine)
    if same.any():
        loss += float(np.mean(1.0 - cosine[same]))
        g_cos[same] = -1.0 / same.sum()
    if diff.any():
        active = diff & (cosine > margin)
        loss += float(np.sum(cosine[active] - margin) / diff.sum())
        g_cos[active] = 1.0 / diff.sum()

    # dcos_ij/du_i = u_j; poi proiezione sul tangente della normalizzazione
    g_sym = g_cos + g_cos.T
    g_unit = g_sym @ unit
    g_emb = (g_unit - np.sum(g_unit * unit, axis=1, keepdims=True) * unit) / norms[:, np.newaxis]
    return loss, g_emb


def approximation_loss(
    embeddings: np.ndarray, speaker_vectors: np.ndarray
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Errore quadratico medio tra S e la somma dei layer E.

    Spinge ogni layer ad approssimare il residuo lasciato dai precedenti.

    Returns:
        (loss, gradiente rispetto a E, gradiente rispetto a S)
    """
    diff = speaker_vectors - embeddings
    loss = float(np.mean(diff ** 2))
    g_speaker = 2.0 * diff / diff.size
    return loss, -g_speaker, g_speaker


# =====================
# Training loop
# =====================


def compute_features(corpus: Corpus, mel_cfg: MelConfig) -> List[MelSpectrogram]:
    return [extract_features(clip, mel_cfg) for clip in corpus.clips]


def train(
    corpus: Corpus,
    model: ResidualSpeakerModule,
    cfg: TrainConfig,
    mel_cfg: Optional[MelConfig] = None,
    metrics_path: Optional[Union[str, Path]] = None,
    features: Optional[List[MelSpectrogram]] = None,
) -> TrainResult:
    """
    Allena il modulo sul corpus con l'obiettivo proxy di classificazione.

    Args:
        corpus: Corpus con almeno 2 speaker
        model: Modulo da allenare (modificato in-place)
        cfg: Iperparametri di training
        mel_cfg: Front-end (default MelConfig())
        metrics_path: File JSON-lines delle metriche (opzionale)
        features: Mel pre-calcolati (opzionale)

    Raises:
        TrainingAborted: loss non finita
    """
    errors = cfg.validate()
    if errors:
        raise ValueError(f"TrainConfig non valida: {errors[0]}")
    class_labels = corpus.speaker_labels()
    if len(class_labels) < 2:
        raise CorpusError(f"servono almeno 2 speaker, trovati {len(class_labels)}")

    mel_cfg = mel_cfg or MelConfig()
    mels = features if features is not None else compute_features(corpus, mel_cfg)
    index_of = {label: i for i, label in enumerate(class_labels)}
    targets_all = np.array([index_of[label] for label in corpus.labels])

    rng = np.random.default_rng(cfg.seed)
    head = ClassificationHead.create(model.config.d_s, len(class_labels), rng)
    parameters = list(model.params.values()) + head.parameters()
    use_contrastive = cfg.loss == "classification+contrastive"
    metrics = MetricsLog(metrics_path)

    logger.info(
        f"Avvio training: {len(mels)} utterance, {len(class_labels)} speaker, "
        f"max_steps={cfg.max_steps}, batch={cfg.batch_size}, mode={model.config.residual_mode}"
    )

    step = 0
    epoch = 0
    try:
        while step < cfg.max_steps:
            lr = lr_at_epoch(epoch, cfg.optimizer)
            order = rng.permutation(len(mels))
            for start in range(0, len(order), cfg.batch_size):
                if step >= cfg.max_steps:
                    break
                batch = order[start: start + cfg.batch_size]
                targets = targets_all[batch]
                segments = [slice_segment(mels[i], cfg.segment_frames, rng) for i in batch]

                try:
                    forwards = [model.forward_with_tape(segment) for segment in segments]
                except NumericalError as e:
                    raise TrainingAborted(step + 1, model.parameter_norms(), f"valori non finiti ({e})") from e
                embeddings = np.vstack([output.embedding for output, _ in forwards])
                speakers = np.vstack([output.speaker_vector for output, _ in forwards])

                ce, g_emb, head_grads = classification_loss(embeddings, targets, head)
                components = {"classification": ce}
                loss = ce
                if use_contrastive and len(batch) >= 2:
                    cl, g_cl = contrastive_loss(embeddings, targets, cfg.contrastive_margin)
                    components["contrastive"] = cl
                    loss += cfg.contrastive_weight * cl
                    g_emb = g_emb + cfg.contrastive_weight * g_cl
                g_speakers = np.zeros_like(speakers)
                if cfg.approximation_weight > 0:
                    al, g_al_emb, g_al_spk = approximation_loss(embeddings, speakers)
                    components["approximation"] = al
                    loss += cfg.approximation_weight * al
                    g_emb = g_emb + cfg.approximation_weight * g_al_emb
                    g_speakers = cfg.approximation_weight * g_al_spk

                if not np.isfinite(loss):
                    raise TrainingAborted(step + 1, model.parameter_norms())

                for (_, tape), grad, grad_speaker in zip(forwards, g_emb, g_speakers):
                    model.backward_from_tape(tape, grad, grad_speaker)
                head.weight.grad += head_grads["weight"]
                head.bias.grad += head_grads["bias"]

                try:
                    for param in parameters:
                        adamw_step(param, lr, cfg.optimizer)
                except NumericalError as e:
                    raise TrainingAborted(step + 1, model.parameter_norms(), str(e)) from e

                step += 1
                model.training_step = step
                metrics.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss, "components": components})
                if step == 1 or step % cfg.log_every == 0:
                    logger.info(f"step {step:5d} | epoch {epoch:4d} | lr {lr:.6g} | loss {loss:.5f}")
            epoch += 1
    finally:
        # Anche su abort: gli step completati restano nel log
        metrics.flush()

    logger.info(f"Training completato: {step} step, {epoch} epoche, loss finale {metrics.records[-1]['loss']:.5f}")
    return TrainResult(model=model, head=head, metrics=metrics.records, class_labels=class_labels)


# =====================
# Valutazione
# =====================


def _group_by_speaker(labels: Sequence[int]) -> Dict[int, List[int]]:
    groups: Dict[int, List[int]] = {}
    for i, label in enumerate(labels):
        groups.setdefault(label, []).append(i)
    if len(groups) < 2:
        raise CorpusError(f"servono almeno 2 speaker per la valutazione, trovati {len(groups)}")
    for label, indices in groups.items():
        if len(indices) < 2:
            raise CorpusError(f"speaker {label}: {len(indices)} utterance, ne servono almeno 2")
    return groups


def nearest_centroid_accuracy(embeddings: np.ndarray, labels: Sequence[int]) -> float:
    """Leave-one-out: ogni utterance contro i centroidi delle altre (coseno)."""
    groups = _group_by_speaker(labels)
    unit = embeddings / np.maximum(np.linalg.norm(embeddings, axis=1, keepdims=True), 1e-12)
    speakers = sorted(groups)
    sums = {s: unit[groups[s]].sum(axis=0) for s in speakers}
    counts = {s: len(groups[s]) for s in speakers}

    correct = 0
    for i, label in enumerate(labels):
        best, best_score = None, -np.inf
        for s in speakers:
            if s == label:
                centroid = (sums[s] - unit[i]) / (counts[s] - 1)
            else:
                centroid = sums[s] / counts[s]
            norm = np.linalg.norm(centroid)
            score = float(unit[i] @ centroid / norm) if norm > 0 else -np.inf
            if score > best_score:
                best, best_score = s, score
        correct += int(best == label)
    return correct / len(labels)


def embed_corpus(
    model: ResidualSpeakerModule, mels: Sequence[MelSpectrogram]
) -> Tuple[np.ndarray, np.ndarray]:
    """(embedding N x d_s, pesi appiattiti N x K*n)."""
    outputs = [model.forward_with_tape(mel)[0] for mel in mels]
    embeddings = np.vstack([o.embedding for o in outputs])
    weights = np.vstack([o.weight_matrix.reshape(-1) for o in outputs])
    return embeddings, weights


def evaluate_embeddings(
    model: ResidualSpeakerModule,
    corpus: Corpus,
    unseen: Optional[Corpus] = None,
    mel_cfg: Optional[MelConfig] = None,
) -> EvaluationReport:
    """
    Accuratezza nearest-centroid sugli speaker visti e gap di similarità
    (stesso speaker - speaker diversi) sugli speaker non visti.

    Se `unseen` è None il gap è calcolato su `corpus`.
    """
    mel_cfg = mel_cfg or MelConfig()
    _group_by_speaker(corpus.labels)
    embeddings, _ = embed_corpus(model, compute_features(corpus, mel_cfg))
    accuracy = nearest_centroid_accuracy(embeddings, corpus.labels)

    gap_corpus = unseen if unseen is not None else corpus
    _group_by_speaker(gap_corpus.labels)
    gap_embeddings, gap_weights = embed_corpus(model, compute_features(gap_corpus, mel_cfg))
    same, different = same_different_similarity(gap_embeddings, gap_corpus.labels)
    w_same, w_different = same_different_similarity(gap_weights, gap_corpus.labels)

    report = EvaluationReport(
        accuracy=accuracy,
        num_speakers=len(corpus.speaker_labels()),
        num_utterances=len(corpus),
        same_similarity=same,
        different_similarity=different,
        similarity_gap=same - different,
        weight_same_similarity=w_same,
        weight_different_similarity=w_different,
        weight_similarity_gap=w_same - w_different,
    )
    logger.info(
        f"Valutazione: accuracy={report.accuracy:.3f}, gap coseno={report.similarity_gap:.4f}, "
        f"gap pesi={report.weight_similarity_gap:.4f}"
    )
    return report
