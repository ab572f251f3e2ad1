"""N-gram masked decoder self-attention (C++ core with Python bindings)."""

from ._ngram import (
    BOS,
    EOS,
    PAD,
    DecodeState,
    MaskSpec,
    ModelConfig,
    ModelParams,
    ProtocolError,
    RingBufferCache,
    TaskSpec,
    TrainingError,
    TrainOptions,
    batch_loss,
    build_mask,
    decode_full,
    encode,
    evaluate,
    gen_task,
    grad_check,
    greedy_decode,
    incremental_step,
    init_params,
    load_checkpoint,
    run_cli,
    save_checkpoint,
    scaled_dot_attention,
    start_decode,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
