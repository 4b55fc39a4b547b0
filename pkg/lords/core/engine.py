"""
LordsEngine - pipeline logic separated from the CLI.
Main API for quantization, refinement, QAT and PEFT workflows.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .blockwise import (aligned_rank, BitConfig, blockwise_quantize, dequantize,
                        mixed_precision_plan)
from .cache import RunCache, weights_digest
from .codebook import build_codebook
from .config import ConfigManager, LordsConfig, resolve_state_dir
from .errors import RankError, ShapeError
from .formats import decode_packed, encode_packed, to_storage, to_storage_precision
from .matrix import as_matrix, DenseMatrix, singular_values
from .metrics import artifact_row, ComparisonTable, nf4_baseline
from .peft import (additive_delta_rank_reference, effective_rank, make_peft_task, merge_factors, peft_delta,
                   PeftConfig, PeftResult, toy_peft_train)
from .refine import refine_to_tensor, RefineConfig, RefineReport
from .ste import make_regression_instance, QatConfig, QatResult, toy_qat_train
from .tensors import BlockScales, CodebookId, FactorPair, QuantizedTensor

logger = logging.getLogger(__name__)

Progress = Optional[Callable[[int, float], None]]


class LordsEngine:
    """
    Core pipeline engine for lords.
    Owns the effective configuration and the run cache, and hands back
    artifacts exactly as they will read back from disk.
    Independent of any UI implementation.
    """

    def __init__(self, state_dir: Optional[str] = None, use_cache: Optional[bool] = None):
        """
        Initialize the engine.

        Args:
            state_dir: State directory (default: $LORDS_STATE_DIR or ./.lords)
            use_cache: Override the configured run-cache switch
        """
        self.state_dir: Path = resolve_state_dir(state_dir)
        self._config_manager = ConfigManager(self.state_dir)
        self.config: LordsConfig = self._config_manager.config
        self.use_cache = self.config.use_cache if use_cache is None else use_cache
        self._cache: Optional[RunCache] = None

    @property
    def cache(self) -> RunCache:
        """Run cache, created on first use so read-only commands leave no state behind"""
        if self._cache is None:
            self._cache = RunCache(self.state_dir)
        return self._cache

    # Configuration
    def init_config(self) -> Path:
        path = self._config_manager.save_default_config()
        self.config = self._config_manager.config
        return path

    def codebook(self, label: Optional[str] = None) -> CodebookId:
        return CodebookId.from_label(label) if label else self.config.codebook_id

    # Quantization pipelines
    def quantize(self, w: DenseMatrix, codebook: Optional[CodebookId] = None,
                 block_size: Optional[int] = None) -> QuantizedTensor:
        """Block-wise baseline quantization with the configured defaults."""
        cb = build_codebook(codebook or self.config.codebook_id)
        q = blockwise_quantize(w, block_size or self.config.block_size, cb)
        return to_storage(q)

    def resolve_rank(self, w: DenseMatrix, rank: Optional[int], block_size: Optional[int] = None,
                     adapter_rank: int = 0) -> int:
        """
        Explicit rank, or the block-budget rank (plus adapter rank) for 'auto'.

        Raises:
            RankError: if an adapter rank comes with an explicit rank
        """
        if rank is not None:
            if adapter_rank:
                raise RankError(f"adapter rank only applies to the auto rank, got explicit rank {rank}")
            return rank
        n, m = w.shape
        return aligned_rank(n, m, block_size or self.config.block_size, adapter_rank)

    def refine_config(self, rank: int, steps: Optional[int] = None, lr: Optional[float] = None,
                      codebook: Optional[CodebookId] = None) -> RefineConfig:
        return RefineConfig(
            rank=rank,
            steps=self.config.steps if steps is None else steps,
            lr=self.config.lr if lr is None else lr,
            codebook=codebook or self.config.codebook_id,
            beta1=self.config.beta1,
            beta2=self.config.beta2,
            eps=self.config.eps,
            weight_decay=self.config.weight_decay,
        )

    def refine(self, w: DenseMatrix, cfg: RefineConfig, progress: Progress = None,
               refresh: bool = False) -> Tuple[QuantizedTensor, RefineReport, bool]:
        """
        Run (or fetch from cache) the refinement loop.

        Args:
            w: Weight matrix
            cfg: Refinement configuration
            progress: Optional per-iteration callback
            refresh: Skip the cache lookup and store the result as a new version

        Returns:
            (artifact, report, served_from_cache)
        """
        w = as_matrix(w, "weights")
        digest = weights_digest(w)
        key = cfg.key()
        if self.use_cache and not refresh:
            cached = self.cache.get_run(digest, key)
            if cached:
                logger.info("refine served from cache (%s v%d)", digest[:12], cached.version)
                return decode_packed(cached.artifact, what="cached artifact"), cached.report, True

        q, report = refine_to_tensor(w, cfg, progress)
        q = to_storage(q)
        if self.use_cache:
            version = self.cache.store_run(digest, key, w.shape, encode_packed(q), report)
            logger.info("stored refine run %s v%d", digest[:12], version)
        return q, report, False

    def dequantize(self, q: QuantizedTensor) -> DenseMatrix:
        return dequantize(q)

    def quantize_layers(self, layers: Sequence[DenseMatrix], bits: BitConfig,
                        method: str = "blockwise", block_size: Optional[int] = None,
                        progress: Progress = None) -> List[QuantizedTensor]:
        """
        Quantize a stack of layers with the codebook each gets from the
        mixed-precision plan.

        Args:
            layers: Layer weight matrices, first layer first
            bits: Average-bit configuration
            method: 'blockwise' or 'lords'
            block_size: Block size (and the budget LoRDS ranks are matched to)
        """
        if method not in ("blockwise", "lords"):
            raise ShapeError(f"unknown method '{method}' (choose blockwise or lords)")
        block = block_size or self.config.block_size
        plan = mixed_precision_plan(len(layers), bits)
        artifacts = []
        for i, (w, codebook_id) in enumerate(zip(layers, plan)):
            w = as_matrix(w, f"layer {i}")
            if method == "blockwise":
                q = self.quantize(w, codebook_id, block)
            else:
                cfg = self.refine_config(self.resolve_rank(w, None, block), codebook=codebook_id)
                q, _, _ = self.refine(w, cfg)
            logger.info("layer %d: %s %s", i, method, codebook_id.label)
            artifacts.append(q)
            if progress:
                progress(i + 1, float(q.float_params))
        return artifacts

    # Reporting
    def error_report(self, w: DenseMatrix, artifacts: Sequence[Tuple[str, QuantizedTensor]],
                     block_size: Optional[int] = None) -> ComparisonTable:
        """
        Score artifacts against the weights they came from.

        The NF4 baseline block size is block_size, else the block size of the
        first block-wise artifact, else the configured default.
        """
        w = as_matrix(w, "weights")
        if not artifacts:
            raise ShapeError("error report needs at least one artifact")
        if block_size is None:
            block_size = next((q.scale_repr.block_size for _, q in artifacts
                               if isinstance(q.scale_repr, BlockScales)), self.config.block_size)
        baseline = nf4_baseline(w, block_size)
        return ComparisonTable(rows=[artifact_row(name, w, q, block_size, baseline) for name, q in artifacts])

    # QAT
    def qat_demo(self, seed: int, steps: Optional[int] = None, lr: Optional[float] = None,
                 modes: Sequence[str] = ("joint",), codebook: CodebookId = CodebookId.INT4S,
                 progress: Progress = None, scale_lr_ratio: Optional[float] = None) -> Dict[str, QatResult]:
        """
        Toy fake-quantized regression from one seeded instance.

        Args:
            seed: Instance seed
            modes: 'joint' trains W, B and A; 'weights' trains W only

        Returns:
            Result per mode, in the order requested
        """
        data, w, factors = make_regression_instance(seed, codebook=codebook)
        results: Dict[str, QatResult] = {}
        for mode in modes:
            if mode not in ("joint", "weights"):
                raise ShapeError(f"unknown QAT mode '{mode}' (choose joint or weights)")
            cfg = QatConfig(
                lr=self.config.qat_lr if lr is None else lr,
                steps=self.config.qat_steps if steps is None else steps,
                scale_lr_ratio=self.config.qat_scale_lr_ratio if scale_lr_ratio is None else scale_lr_ratio,
                train_scales=mode == "joint",
                codebook=codebook,
                clamp_eps=self.config.clamp_eps,
            )
            results[mode] = toy_qat_train(data, w, factors, cfg, progress)
        return results

    # PEFT
    def peft_merge(self, base: QuantizedTensor, tuned: FactorPair) -> QuantizedTensor:
        return to_storage(merge_factors(base, tuned))

    def peft_start(self, base: QuantizedTensor) -> FactorPair:
        """Starting point for scale fine-tuning: a copy of the refined factors."""
        if not isinstance(base.scale_repr, FactorPair):
            raise ShapeError("scale fine-tuning needs a factored (refined) artifact, got block scales")
        return FactorPair(b=base.scale_repr.b.copy(), a=base.scale_repr.a.copy())

    def peft_train(self, base: QuantizedTensor, start: FactorPair, seed: int = 0, steps: Optional[int] = None,
                   lr: Optional[float] = None, progress: Progress = None) -> PeftResult:
        """
        Fine-tune the scale factors of base on its seeded toy task.

        Args:
            base: Factored artifact; its codes stay frozen
            start: Starting factors (see peft_start)
            seed: Task seed

        Returns:
            PeftResult whose factors are rounded to storage precision
        """
        if not isinstance(base.scale_repr, FactorPair):
            raise ShapeError("scale fine-tuning needs a factored (refined) artifact, got block scales")
        cfg = PeftConfig(
            lr=self.config.peft_lr if lr is None else lr,
            steps=self.config.peft_steps if steps is None else steps,
            clamp_eps=self.config.clamp_eps,
        )
        result = toy_peft_train(make_peft_task(base, seed), base, start, cfg, progress)
        result.factors = FactorPair(b=to_storage_precision(result.factors.b), a=to_storage_precision(result.factors.a))
        return result

    def delta_spectrum(self, base: QuantizedTensor, tuned: FactorPair, lora_rank: Optional[int] = None,
                       seed: int = 0) -> Tuple[int, np.ndarray, Optional[np.ndarray]]:
        """
        Singular values of the multiplicative update, optionally next to
        those of a random additive update of lora_rank.

        Returns:
            (effective rank, spectrum, additive spectrum or None)
        """
        if not isinstance(base.scale_repr, FactorPair):
            raise ShapeError("delta analysis needs a factored (refined) artifact, got block scales")
        delta = peft_delta(base.codes, build_codebook(base.codebook_id), base.scale_repr, tuned)
        rank = effective_rank(delta, self.config.rank_tol)
        additive = None
        if lora_rank is not None:
            rng = np.random.default_rng(seed)
            b_lora = rng.standard_normal((base.rows, lora_rank))
            a_lora = rng.standard_normal((lora_rank, base.cols))
            logger.info("additive rank-%d update: effective rank %d", lora_rank,
                        additive_delta_rank_reference(b_lora, a_lora, self.config.rank_tol))
            additive = singular_values(b_lora @ a_lora)
        logger.info("multiplicative update from rank-%d factors: effective rank %d", tuned.rank, rank)
        return rank, singular_values(delta), additive

    # Run cache management
    def get_cache_stats(self) -> Dict:
        return self.cache.get_stats()

    def list_runs(self, limit: int = 20) -> List[Dict]:
        return self.cache.list_runs(limit)

    def clear_cache(self) -> int:
        return self.cache.clear()

    def cleanup_cache(self, keep_versions: Optional[int] = None) -> int:
        """Drop all but the newest keep_versions runs per weights/config pair."""
        keep = self.config.keep_versions if keep_versions is None else keep_versions
        return self.cache.cleanup_old_versions(keep)
