import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from analysis.audio_frontend import CLIP_SAMPLES, AudioFrontend
from assembly.model_assembler import Evaluation, KwsNetwork, evaluate
from config.settings import BETA_CHOICES, Settings, load_settings
from cost.cost_model import OpCost, model_cost
from dataset.loader import SampleLoader
from dataset.manifest import SPLITS, TEST, TRAIN, VALIDATION, DatasetManifest
from dataset.speech_commands import load_speech_commands
from dataset.toy import synthesize_toy
from director.data_loader import BatchLoader
from director.search_director import METRICS_HEADER, SEARCH_LOG_HEADER, RetrainResult, SearchDirector, SearchResult
from quantization.export import export_packed
from quantization.quantizer import QuantizerSpec, post_quantize
from storage.artifact_store import ArtifactStore
from supernet.architecture import ArchitectureDescription
from utils.errors import CheckpointError, ConfigError
from utils.logger import setup_logger

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

ARCHITECTURE_FILE = "architecture.txt"
MODEL_CHECKPOINT = "checkpoints/model.npz"
PACKED_WEIGHTS = "weights.kwsq"
BITSWEEP_HEADER = ("bits", "method", "accuracy", "bytes")
COST_HEADER = ("bits", "ops", "weights", "exempt_weights", "bytes", "bytes_with_exempt")
SWEEP_HEADER = ("beta", "expected_ops", "ops", "weights", "bytes", "acc_test")


class KwsNasPipeline:
    """Feature prep, architecture search, retraining and reporting for keyword spotting"""

    def __init__(self, settings: Settings):
        self.logger = setup_logger("pipeline")
        self.store = ArtifactStore(settings.run.output_dir)
        self.folders = self.store.organize_run_folders()
        self.manifest = self._load_manifest(settings)
        # the class count always follows the dataset
        self.settings = replace(settings, supernet=replace(settings.supernet, num_classes=self.manifest.num_classes))
        self.frontend = AudioFrontend(self.settings.mfcc, self.settings.augment)
        self.samples = SampleLoader(self.manifest, self.frontend)
        self.num_frames = self.settings.mfcc.num_frames(CLIP_SAMPLES)

    def _load_manifest(self, settings: Settings) -> DatasetManifest:
        if settings.is_toy:
            self.logger.info(
                f"Synthesizing toy dataset: {settings.run.toy_classes} classes x "
                f"{settings.run.toy_samples_per_class} clips"
            )
            return synthesize_toy(settings.run.toy_classes, settings.run.toy_samples_per_class, settings.run.seed)
        self.logger.info(f"Indexing Speech Commands at {settings.run.dataset}")
        return load_speech_commands(Path(settings.run.dataset), settings.run.seed)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.settings.run.seed)

    def loader(self, split: str) -> BatchLoader:
        return BatchLoader(self.samples, split, self.settings.schedule.batch_size)

    def director(self, settings: Optional[Settings] = None) -> SearchDirector:
        return SearchDirector(settings or self.settings, self.store)

    def features(self) -> Dict[str, Any]:
        """Write manifest.tsv and one cached feature blob per split"""

        self.logger.info("🎛️ Computing MFCC features")
        outputs: Dict[str, Any] = {"manifest": str(self.manifest.save_tsv(self.store.path("manifest.tsv")))}
        for split in SPLITS:
            if not self.manifest.split(split):
                continue
            features, labels, clip_ids = self.samples.load_split(split)
            blob, _ = self.store.save_features(split, features, labels, clip_ids, self.settings.mfcc.to_dict())
            outputs[split] = {"path": str(blob), "count": int(features.shape[0]), "shape": list(features.shape[1:])}
        return outputs

    def search(self, settings: Optional[Settings] = None, arch_name: str = ARCHITECTURE_FILE,
               log_name: str = "search_log.csv") -> SearchResult:
        settings = settings or self.settings
        self.logger.info(f"🔎 Architecture search (beta={settings.tradeoff.beta}, ops_target={settings.tradeoff.ops_target:g})")
        try:
            result = self.director(settings).run_search(
                self.loader(TRAIN), self.loader(VALIDATION), self.rng(), num_frames=self.num_frames
            )
        except Exception as e:
            self.logger.error(f"❌ Search failed: {e}")
            raise
        result.architecture.save(self.store.path(arch_name))
        self.store.write_table(log_name, SEARCH_LOG_HEADER, [row.as_row() for row in result.log])
        self.logger.info(f"✅ Architecture written to {self.store.path(arch_name)}")
        return result

    def train(self, arch: ArchitectureDescription, bits: Optional[int] = None) -> RetrainResult:
        """Retrain a derived architecture and write checkpoint, metrics, summary and packed weights"""

        self.logger.info("🏋️ Retraining derived architecture")
        result = self.director().retrain(
            arch, self.loader(TRAIN), self.loader(VALIDATION), self.loader(TEST), self.rng(), bits=bits
        )
        self.store.save_checkpoint(
            MODEL_CHECKPOINT, result.network.state_dict(), architecture=arch.to_text(),
            extra={"bits": bits, "class_names": list(self.manifest.class_names)},
        )
        self.store.write_table("metrics.csv", METRICS_HEADER, [row.as_row() for row in result.metrics])

        cost = model_cost(arch, bits)
        summary = {
            "bits": bits if bits is not None else "off",
            "acc_train": result.metrics[-1].acc_train if result.metrics else None,
            "acc_val": result.validation.accuracy,
            "acc_test": result.test_accuracy,
            "ops": cost.ops,
            "weights": cost.weights,
            "bytes": cost.bytes,
            "bytes_with_exempt": cost.bytes_with_exempt,
            "architecture": arch.labels(),
        }
        if bits is not None:
            summary["packed_weights"] = str(export_packed(result.network, QuantizerSpec(bits), self.store.path(PACKED_WEIGHTS)))
        self.store.write_summary("summary.json", summary)
        return result

    def bitsweep(self, arch: ArchitectureDescription, bits_list: Sequence[int]) -> List[list]:
        """STE retraining vs full-precision training rounded afterwards, per bit-width"""

        self.logger.info(f"📉 Bit sweep over {list(bits_list)}")
        director = self.director()
        full_precision = director.retrain(arch, self.loader(TRAIN), self.loader(VALIDATION), self.loader(TEST),
                                          self.rng(), bits=None)
        rows = []
        for bits in bits_list:
            spec = QuantizerSpec(bits)
            cost = model_cost(arch, bits)
            ste = director.retrain(arch, self.loader(TRAIN), self.loader(VALIDATION), self.loader(TEST),
                                   self.rng(), bits=bits)
            rows.append([bits, "ste", ste.test_accuracy, cost.bytes])

            rounded = KwsNetwork.from_architecture(arch, self.rng())
            rounded.load_state_dict(full_precision.network.state_dict())
            post_quantize(rounded, spec)
            post = evaluate(rounded, self.loader(TEST).batches(shuffle=False, drop_small=False), arch.num_classes)
            rows.append([bits, "post", post.accuracy, cost.bytes])
            self.logger.info(f"{bits} bits: ste {ste.test_accuracy:.4f} post {post.accuracy:.4f}")
        self.store.write_table("bitsweep.csv", BITSWEEP_HEADER, rows)
        return rows

    def cost(self, arch: ArchitectureDescription, bits: Optional[int]) -> OpCost:
        cost = model_cost(arch, bits)
        self.store.write_table("cost.csv", COST_HEADER, [[
            bits if bits is not None else "off", cost.ops, cost.weights, cost.exempt_weights,
            cost.bytes, cost.bytes_with_exempt,
        ]])
        return cost

    def evaluate_checkpoint(self, checkpoint: Path, split: str) -> Evaluation:
        loaded = self.store.load_checkpoint(checkpoint)
        if not loaded["architecture"]:
            raise CheckpointError(f"{checkpoint} does not hold an architecture")
        arch = ArchitectureDescription.from_text(loaded["architecture"])
        network = KwsNetwork.from_architecture(arch, self.rng())
        network.load_state_dict(loaded["state"])
        bits = loaded["extra"].get("bits")
        network.set_quantizer(QuantizerSpec(bits) if bits is not None else None)

        result = evaluate(network, self.loader(split).batches(shuffle=False, drop_small=False), arch.num_classes)
        names = list(self.manifest.class_names)
        self.store.write_table(
            f"confusion_{split}.csv", ["label"] + names,
            [[name] + [int(v) for v in row] for name, row in zip(names, result.confusion)],
        )
        self.logger.info(f"{split} accuracy {result.accuracy:.4f} over {result.num_samples} samples")
        support = ", ".join(f"{name}={int(n)}" for name, n in zip(names, result.per_class_counts()))
        self.logger.debug(f"{split} samples per class: {support}")
        return result

    def sweep(self, betas: Sequence[float]) -> List[list]:
        """One search + retrain per beta: the accuracy/ops trade-off curve"""

        rows = []
        for beta in betas:
            settings = replace(self.settings, tradeoff=replace(self.settings.tradeoff, beta=float(beta)))
            tag = f"beta{beta:g}"
            searched = self.search(settings, arch_name=f"architecture_{tag}.txt", log_name=f"search_log_{tag}.csv")
            arch = searched.architecture
            retrained = self.director(settings).retrain(
                arch, self.loader(TRAIN), self.loader(VALIDATION), self.loader(TEST), self.rng(),
                bits=settings.run.quant_bits,
            )
            cost = model_cost(arch, settings.run.quant_bits)
            rows.append([float(beta), searched.log[-1].expected_ops if searched.log else float("nan"),
                         cost.ops, cost.weights, cost.bytes, retrained.test_accuracy])
        self.store.write_table("sweep.csv", SWEEP_HEADER, rows)
        return rows


class UsageArgumentParser(argparse.ArgumentParser):
    """Reports argument problems as ConfigError instead of exiting"""

    def error(self, message):
        raise ConfigError("arguments", message)


def _bits_list(raw: str) -> List[int]:
    values = [int(v) for v in raw.split(",") if v.strip()]
    if not values or any(not 1 <= v <= 8 for v in values):
        raise argparse.ArgumentTypeError("bit-widths must lie in [1, 8]")
    return values


def _beta_list(raw: str) -> List[float]:
    values = [float(v) for v in raw.split(",") if v.strip()]
    if not values or any(v not in BETA_CHOICES for v in values):
        raise argparse.ArgumentTypeError(f"beta values must be among {BETA_CHOICES}")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = UsageArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", dest="output_dir", type=Path, help="output directory")
    common.add_argument("--dataset", help="Speech Commands root or 'toy'")
    common.add_argument("--num-mfcc", type=int)
    common.add_argument("--omega", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--ops-target", type=float)
    common.add_argument("--quant-bits", help="1-8 or 'off'")
    common.add_argument("--epochs", type=int, help="search epochs for search/sweep, retrain epochs otherwise")
    common.add_argument("--pretrain-epochs", type=int)
    common.add_argument("--search-epochs", type=int)
    common.add_argument("--retrain-epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--base-channels", type=int)
    common.add_argument("--num-layers", type=int)
    common.add_argument("--toy-classes", type=int)
    common.add_argument("--toy-samples", dest="toy_samples_per_class", type=int)
    common.add_argument("--set", dest="extra", action="append", default=[], metavar="KEY=VALUE",
                        help="any other configuration key")

    parser = UsageArgumentParser(prog="kws-nas", description="Differentiable architecture search for keyword spotting")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("features", parents=[common], help="write manifest and cached MFCC features")
    commands.add_parser("search", parents=[common], help="search and write an architecture file")
    train = commands.add_parser("train", parents=[common], help="retrain an architecture")
    train.add_argument("arch", type=Path)
    bitsweep = commands.add_parser("bitsweep", parents=[common], help="STE vs post-rounding per bit-width")
    bitsweep.add_argument("arch", type=Path)
    bitsweep.add_argument("--bits", type=_bits_list, default=list(range(1, 9)))
    cost = commands.add_parser("cost", parents=[common], help="ops and memory of an architecture")
    cost.add_argument("arch", type=Path)
    evaluate_cmd = commands.add_parser("eval", parents=[common], help="evaluate a model checkpoint")
    evaluate_cmd.add_argument("checkpoint", type=Path)
    evaluate_cmd.add_argument("--split", choices=SPLITS, default=TEST)
    sweep = commands.add_parser("sweep", parents=[common], help="search + retrain for several betas")
    sweep.add_argument("--betas", type=_beta_list, default=list(BETA_CHOICES))
    return parser


OVERRIDE_FLAGS = (
    "seed", "output_dir", "dataset", "num_mfcc", "omega", "beta", "ops_target", "quant_bits",
    "pretrain_epochs", "search_epochs", "retrain_epochs", "batch_size", "base_channels", "num_layers",
    "toy_classes", "toy_samples_per_class",
)


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    for item in args.extra:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("set", f"expected KEY=VALUE, got {item!r}")
        overrides[key] = value
    for name in OVERRIDE_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if args.epochs is not None:
        key = "search_epochs" if args.command in ("search", "sweep") else "retrain_epochs"
        overrides.setdefault(key, args.epochs)
    return overrides


def run_command(args: argparse.Namespace, settings: Settings) -> Any:
    pipeline = KwsNasPipeline(settings)
    if args.command == "features":
        return pipeline.features()
    if args.command == "search":
        return pipeline.search()
    if args.command == "sweep":
        return pipeline.sweep(args.betas)
    if args.command == "eval":
        return pipeline.evaluate_checkpoint(args.checkpoint, args.split)

    arch = ArchitectureDescription.load(args.arch)
    if arch.num_mfcc != pipeline.settings.mfcc.num_mfcc:
        raise ConfigError("num_mfcc", f"architecture expects {arch.num_mfcc} coefficients")
    if args.command == "train":
        return pipeline.train(arch, pipeline.settings.run.quant_bits)
    if args.command == "bitsweep":
        return pipeline.bitsweep(arch, args.bits)
    if args.command == "cost":
        cost = pipeline.cost(arch, pipeline.settings.run.quant_bits)
        print(f"ops={cost.ops} weights={cost.weights} exempt_weights={cost.exempt_weights} "
              f"bytes={cost.bytes:g} bytes_with_exempt={cost.bytes_with_exempt:g}")
        return cost
    raise ConfigError("command", f"unknown command {args.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Exit code 0 on success, 1 on usage or configuration errors, 2 on runtime failures"""

    logger = setup_logger("cli")
    try:
        args = build_parser().parse_args(argv)
        settings = load_settings(args.config, collect_overrides(args))
    except ConfigError as e:
        logger.error(f"Usage error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        run_command(args, settings)
    except ConfigError as e:
        logger.error(f"Usage error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"❌ {args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
