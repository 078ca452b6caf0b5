"""Transformer config -> ResBlock IR -> STA instruction stream.

Tensors are named by string ids.  Weights are ``K x L`` (``in x out``)
matrices contracted as ``x @ W`` with their bias bundled into the same load.
Activations are ``seq x width`` int16 tiles; attention scores are stored as
``heads * seq`` stacked rows.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
from dataclasses import dataclass, field
from importlib import resources

from .dmme.engine import Mode
from .errors import CorruptStream, InvalidConfig
from .nmformat import NmConfig

ACT_BYTES = 2  # int16 activations and scores
MODEL_FIELDS = ("num_encoders", "num_decoders", "seq_len", "heads", "hidden", "intermediate")


class Activation(enum.Enum):
    GELU = "gelu"
    RELU = "relu"


@dataclass(frozen=True)
class ModelConfig:
    num_encoders: int
    num_decoders: int
    seq_len: int
    heads: int
    hidden: int
    intermediate: int
    activation: Activation = Activation.GELU
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        for key in ("seq_len", "heads", "hidden", "intermediate"):
            if getattr(self, key) < 1:
                raise InvalidConfig(f"{key} must be >= 1")
        if self.num_encoders < 0 or self.num_decoders < 0:
            raise InvalidConfig("layer counts must be >= 0")
        if self.num_encoders == 0 and self.num_decoders == 0:
            raise InvalidConfig("model needs at least one encoder or decoder")
        if self.hidden % self.heads:
            raise InvalidConfig(f"hidden {self.hidden} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in MODEL_FIELDS}
        out["activation"] = self.activation.value
        return out

    @classmethod
    def from_dict(cls, data: dict, name: str = "model") -> "ModelConfig":
        missing = [k for k in MODEL_FIELDS if k not in data]
        extra = set(data) - set(MODEL_FIELDS) - {"activation"}
        if missing or extra:
            raise InvalidConfig(f"model config: missing {missing}, unknown {sorted(extra)}")
        bad = [k for k in MODEL_FIELDS if not isinstance(data[k], int) or isinstance(data[k], bool)]
        if bad:
            raise InvalidConfig(f"model config fields must be integers: {bad}")
        kw = {k: data[k] for k in MODEL_FIELDS}
        if "activation" in data:
            kw["activation"] = data["activation"]
        return cls(**kw, name=name)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path) as fh:
            data = json.load(fh)
        return cls.from_dict(data, name=os.path.splitext(os.path.basename(str(path)))[0])


PRESETS = ("bert", "tinybert4", "dino_vits8", "transformer_base_encoders",
           "transformer_base_decoders", "shallow_transformer")


def preset(name: str) -> ModelConfig:
    if name not in PRESETS:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("stasim").joinpath("presets", f"{name}.json").read_text()
    return ModelConfig.from_dict(json.loads(text), name=name)


def load_model_config(spec: str) -> ModelConfig:
    """A preset name or a path to a JSON config."""
    return preset(spec) if spec in PRESETS else ModelConfig.load(spec)


# -- IR ----------------------------------------------------------------------

class BlockKind(enum.Enum):
    MHA = "mha"
    FFN = "ffn"


class VectorKind(enum.Enum):
    BIAS_ADD = "bias_add"
    RESIDUAL_ADD = "residual_add"
    ACTIVATION = "activation"


@dataclass(frozen=True)
class LinearProjection:
    weight_id: str
    in_dims: int
    out_dims: int
    src: str
    out: str
    rows: int
    sparse: bool = True


@dataclass(frozen=True)
class AttentionMatMul:
    a: str
    b: str
    out: str
    dims: tuple  # per-head (J, K, L)
    heads: int
    transpose_b: bool = False
    a_stacked: bool = False
    out_stacked: bool = False
    dense: bool = True


@dataclass(frozen=True)
class Softmax:
    src: str
    out: str
    vector_len: int
    repeat_count: int
    causal: bool = False
    scale: float = 1.0


@dataclass(frozen=True)
class VectorOp:
    kind: VectorKind
    length: int
    rows: int
    operands: tuple
    out: str
    activation: Activation | None = None
    layer_norm: bool = False


@dataclass(frozen=True)
class ResBlockIr:
    kind: BlockKind
    name: str
    ops: tuple
    input: str
    output: str

    def count(self, cls) -> int:
        return sum(isinstance(op, cls) for op in self.ops)


def _linear(block, tag, src, k, l, rows):
    wid = f"{block}.{tag}"
    return [LinearProjection(wid, k, l, src, f"{wid}.y", rows),
            VectorOp(VectorKind.BIAS_ADD, l, rows, (f"{wid}.y", wid), f"{wid}.y")]


def _mha(cfg: ModelConfig, name: str, x: str, kv_src: str, causal: bool) -> ResBlockIr:
    s, d, hd, nh = cfg.seq_len, cfg.hidden, cfg.head_dim, cfg.heads
    ops = []
    ops += _linear(name, "wq", x, d, d, s)
    ops += _linear(name, "wk", kv_src, d, d, s)
    ops += _linear(name, "wv", kv_src, d, d, s)
    q, k, v = (f"{name}.{t}.y" for t in ("wq", "wk", "wv"))
    ops.append(AttentionMatMul(q, k, f"{name}.scores", (s, hd, s), nh, transpose_b=True,
                               out_stacked=True))
    ops.append(Softmax(f"{name}.scores", f"{name}.probs", s, nh * s, causal, 1.0 / math.sqrt(hd)))
    ops.append(AttentionMatMul(f"{name}.probs", v, f"{name}.ctx", (s, s, hd), nh, a_stacked=True))
    ops += _linear(name, "wo", f"{name}.ctx", d, d, s)
    out = f"{name}.out"
    ops.append(VectorOp(VectorKind.RESIDUAL_ADD, d, s, (f"{name}.wo.y", x), out, layer_norm=True))
    return ResBlockIr(BlockKind.MHA, name, tuple(ops), x, out)


def _ffn(cfg: ModelConfig, name: str, x: str) -> ResBlockIr:
    s, d, f = cfg.seq_len, cfg.hidden, cfg.intermediate
    ops = _linear(name, "w1", x, d, f, s)
    ops.append(VectorOp(VectorKind.ACTIVATION, f, s, (f"{name}.w1.y",), f"{name}.w1.y",
                        activation=cfg.activation))
    ops += _linear(name, "w2", f"{name}.w1.y", f, d, s)
    out = f"{name}.out"
    ops.append(VectorOp(VectorKind.RESIDUAL_ADD, d, s, (f"{name}.w2.y", x), out, layer_norm=True))
    return ResBlockIr(BlockKind.FFN, name, tuple(ops), x, out)


def build_ir(config: ModelConfig) -> list[ResBlockIr]:
    """Encoders as MHA+FFN pairs, then decoders as masked self-MHA, cross-MHA and FFN."""
    if not isinstance(config, ModelConfig):
        raise InvalidConfig("build_ir needs a ModelConfig")
    blocks = []
    x = "src"
    for e in range(config.num_encoders):
        blocks.append(_mha(config, f"enc{e}.mha", x, x, causal=False))
        blocks.append(_ffn(config, f"enc{e}.ffn", blocks[-1].output))
        x = blocks[-1].output
    memory = x if config.num_encoders else "mem"
    x = "tgt"
    for d in range(config.num_decoders):
        blocks.append(_mha(config, f"dec{d}.self", x, x, causal=True))
        blocks.append(_mha(config, f"dec{d}.cross", blocks[-1].output, memory, causal=False))
        blocks.append(_ffn(config, f"dec{d}.ffn", blocks[-1].output))
        x = blocks[-1].output
    return blocks


def program_inputs(config: ModelConfig) -> list[str]:
    names = []
    if config.num_encoders:
        names.append("src")
    if config.num_decoders:
        names.append("tgt")
        if not config.num_encoders:
            names.append("mem")
    return names


@dataclass(frozen=True)
class MacCount:
    dense_macs: int
    sparse_macs: int
    weight_dense_macs: int  # what the weight layers would cost at n = m

    @property
    def total(self) -> int:
        return self.dense_macs + self.sparse_macs

    def as_dict(self) -> dict:
        return {"dense_macs": self.dense_macs, "sparse_macs": self.sparse_macs,
                "weight_dense_macs": self.weight_dense_macs}


def mac_count(ir, nm: NmConfig) -> MacCount:
    """Attention products at full ``J*K*L``; weight products at ``J*L*ceil(K/m)*n``."""
    dense = sparse = weight_dense = 0
    for block in ir:
        for op in block.ops:
            if isinstance(op, AttentionMatMul):
                j, k, l = op.dims
                dense += op.heads * j * k * l
            elif isinstance(op, LinearProjection):
                full = op.rows * op.in_dims * op.out_dims
                weight_dense += full
                if op.sparse:
                    sparse += op.rows * op.out_dims * math.ceil(op.in_dims / nm.m) * nm.n
                else:
                    dense += full
    return MacCount(dense, sparse, weight_dense)


# -- instructions ------------------------------------------------------------

class Region(enum.IntEnum):
    WEIGHT = 0
    INPUT = 1
    INTERMEDIATE = 2


class FusedOp(enum.IntEnum):
    BIAS_ADD = 0
    RESIDUAL_ADD = 1
    ACTIVATION = 2
    SOFTMAX = 3


FLAG_CAUSAL = 1
FLAG_LAYER_NORM = 2
ACT_CODES = {Activation.GELU: 0, Activation.RELU: 1}
SCALE_ONE = 1 << 16  # softmax pre-scale is carried as Q.16


@dataclass(frozen=True)
class Load:
    region: Region
    bytes: int
    id: str


@dataclass(frozen=True)
class Store:
    region: Region
    bytes: int
    id: str


@dataclass(frozen=True)
class MatMul:
    mode: Mode
    j: int
    k: int
    l: int
    heads: int
    a: str
    b: str
    out: str
    transpose_b: bool = False
    a_stacked: bool = False
    out_stacked: bool = False

    @property
    def sparse(self) -> bool:
        return self.mode is Mode.SPARSE_DENSE


@dataclass(frozen=True)
class FusedVector:
    op: FusedOp
    length: int
    rows: int
    operands: tuple
    out: str
    flags: int = 0
    param: int = 0


Instruction = Load | Store | MatMul | FusedVector


@dataclass(frozen=True)
class TensorInfo:
    shape: tuple
    weight: bool = False


def weight_bytes(k: int, l: int, nm: NmConfig, sparse: bool) -> int:
    """Bytes of a ``k x l`` weight plus its bias as loaded from off-chip memory."""
    bias = l * ACT_BYTES
    if not sparse:
        return k * l * ACT_BYTES + bias
    groups = math.ceil(k / nm.m) * l
    return math.ceil(groups * nm.m / 8) + math.ceil(groups * nm.n * nm.q / 8) + bias


@dataclass
class Program:
    """An instruction stream plus the tensor table it refers to."""

    instructions: list
    tensors: dict
    inputs: list
    outputs: list
    nm: NmConfig
    blocks: list = field(default_factory=list)  # (name, kind, first index, end index)

    def __iter__(self):
        return iter(self.instructions)

    def __len__(self):
        return len(self.instructions)

    def __getitem__(self, i):
        return self.instructions[i]

    def weight_ids(self) -> list[str]:
        return [k for k, v in self.tensors.items() if v.weight]


def lower(ir, nm: NmConfig, mode: str | Mode = "auto") -> Program:
    """Lower the IR; ``mode="dense"`` keeps weights dense and forces DenseDense everywhere."""
    force_dense = str(getattr(mode, "value", mode)) == "dense"
    ins: list = []
    tensors: dict = {}
    blocks = []
    resident = set()
    stored = set()
    for block in ir:
        start = len(ins)
        for op in block.ops:
            if isinstance(op, LinearProjection):
                sparse = op.sparse and not force_dense
                tensors[op.weight_id] = TensorInfo((op.in_dims, op.out_dims), weight=True)
                if op.weight_id not in resident:
                    ins.append(Load(Region.WEIGHT, weight_bytes(op.in_dims, op.out_dims, nm, sparse),
                                    op.weight_id))
                    resident.add(op.weight_id)
                ins.append(MatMul(Mode.SPARSE_DENSE if sparse else Mode.DENSE_DENSE,
                                  op.rows, op.in_dims, op.out_dims, 1, op.src, op.weight_id, op.out))
                tensors[op.out] = TensorInfo((op.rows, op.out_dims))
            elif isinstance(op, AttentionMatMul):
                j, k, l = op.dims
                ins.append(MatMul(Mode.DENSE_DENSE, j, k, l, op.heads, op.a, op.b, op.out,
                                  op.transpose_b, op.a_stacked, op.out_stacked))
                tensors[op.out] = TensorInfo((op.heads * j, l) if op.out_stacked else (j, op.heads * l))
            elif isinstance(op, Softmax):
                ins.append(FusedVector(FusedOp.SOFTMAX, op.vector_len, op.repeat_count, (op.src,), op.out,
                                       FLAG_CAUSAL if op.causal else 0, round(op.scale * SCALE_ONE)))
                tensors[op.out] = TensorInfo((op.repeat_count, op.vector_len))
            elif isinstance(op, VectorOp):
                kind = FusedOp[op.kind.name]
                flags = FLAG_LAYER_NORM if op.layer_norm else 0
                param = ACT_CODES[op.activation] if op.activation is not None else 0
                ins.append(FusedVector(kind, op.length, op.rows, tuple(op.operands), op.out, flags, param))
                tensors[op.out] = TensorInfo((op.rows, op.length))
            else:
                raise TypeError(f"unknown IR op {op!r}")
        out_info = tensors[block.output]
        ins.append(Store(Region.INPUT, out_info.shape[0] * out_info.shape[1] * ACT_BYTES, block.output))
        stored.add(block.output)
        blocks.append((block.name, block.kind.value, start, len(ins)))
    inputs = sorted({b.input for b in ir} - stored) if ir else []
    # cross-attention memory that is a program input rather than a block output
    for block in ir:
        for op in block.ops:
            if isinstance(op, LinearProjection) and op.src not in tensors and op.src not in inputs:
                inputs.append(op.src)
    for name in inputs:
        rows, width = next((op.rows, op.in_dims) for b in ir for op in b.ops
                           if isinstance(op, LinearProjection) and op.src == name)
        tensors[name] = TensorInfo((rows, width))
    outputs = [ir[-1].output] if ir else []
    return Program(ins, tensors, inputs, outputs, nm, blocks)


# -- validation ----------------------------------------------------------------

@dataclass(frozen=True)
class MemoryConfig:
    weight_bytes: int = 8 << 20
    input_bytes: int = 2 << 20
    intermediate_bytes: int = 4 << 20

    def capacity(self, region: Region) -> int:
        return (self.weight_bytes, self.input_bytes, self.intermediate_bytes)[region]


@dataclass(frozen=True)
class Diagnostic:
    index: int
    code: str
    message: str

    def __str__(self):
        return f"[{self.index}] {self.code}: {self.message}"


def _reads(ins) -> tuple:
    if isinstance(ins, MatMul):
        return (ins.a, ins.b)
    if isinstance(ins, FusedVector):
        return tuple(ins.operands)
    if isinstance(ins, Store):
        return (ins.id,)
    return ()


def _writes(ins) -> tuple:
    if isinstance(ins, (MatMul, FusedVector)):
        return (ins.out,)
    if isinstance(ins, Load):
        return (ins.id,)
    return ()


def _tensor_bytes(program: Program, name: str) -> int:
    info = program.tensors.get(name)
    if info is None:
        return 0
    return info.shape[0] * info.shape[1] * ACT_BYTES


def _check_dims(i, ins, shapes, out) -> None:
    def shape(name):
        return shapes.get(name)

    if isinstance(ins, MatMul):
        h = ins.heads
        want_a = (h * ins.j, ins.k) if ins.a_stacked else (ins.j, h * ins.k)
        if h == 1:
            want_b = (ins.l, ins.k) if ins.transpose_b else (ins.k, ins.l)
        else:
            want_b = (ins.l, h * ins.k) if ins.transpose_b else (ins.k, h * ins.l)
        for name, want in ((ins.a, want_a), (ins.b, want_b)):
            got = shape(name)
            if got is not None and tuple(got) != want:
                out.append(Diagnostic(i, "dims", f"{name} is {tuple(got)}, MatMul expects {want}"))
    elif isinstance(ins, FusedVector):
        got = shape(ins.operands[0]) if ins.operands else None
        if got is not None and tuple(got) != (ins.rows, ins.length):
            out.append(Diagnostic(i, "dims", f"{ins.operands[0]} is {tuple(got)}, "
                                             f"vector op expects {(ins.rows, ins.length)}"))
        if ins.op is FusedOp.BIAS_ADD and len(ins.operands) > 1:
            w = shape(ins.operands[1])
            if w is not None and w[1] != ins.length:
                out.append(Diagnostic(i, "dims", f"bias of {ins.operands[1]} has {w[1]} entries, "
                                                 f"rows have {ins.length}"))


def _analyze(program: Program, memory: MemoryConfig):
    diags: list[Diagnostic] = []
    try:
        instrs = list(program.instructions)
    except Exception as exc:  # malformed container
        return [Diagnostic(-1, "malformed", str(exc))], {}
    shapes = {k: v.shape for k, v in program.tensors.items()}
    last_use: dict = {}
    for i, ins in enumerate(instrs):
        for name in _reads(ins) + _writes(ins):
            last_use[name] = i
    keep = set(program.outputs)
    defined = set(program.inputs)
    where: dict = {}  # id -> (region, bytes) while resident on chip
    live = [0, 0, 0]

    def place(name, region, size):
        where[name] = (region, size)
        live[region] += size

    for name in program.inputs:
        place(name, Region.INPUT, _tensor_bytes(program, name))
    peak = list(live)
    for i, ins in enumerate(instrs):
        if not isinstance(ins, (Load, Store, MatMul, FusedVector)):
            diags.append(Diagnostic(i, "malformed", f"not an instruction: {ins!r}"))
            continue
        for name in _reads(ins):
            if name not in defined:
                diags.append(Diagnostic(i, "use-before-def", f"{name} read before it is loaded or computed"))
        _check_dims(i, ins, shapes, diags)
        if isinstance(ins, Load):
            if ins.id not in defined:
                defined.add(ins.id)
                place(ins.id, Region(ins.region), ins.bytes)
        elif isinstance(ins, Store):
            if Region(ins.region) is not Region.INPUT:
                diags.append(Diagnostic(i, "region", f"store of {ins.id} targets "
                                                     f"{Region(ins.region).name}; block results go to INPUT"))
            if ins.id in where and where[ins.id][0] is Region.INTERMEDIATE:
                region, size = where.pop(ins.id)
                live[region] -= size
                place(ins.id, Region.INPUT, size)
        elif ins.out not in defined:
            defined.add(ins.out)
            place(ins.out, Region.INTERMEDIATE, _tensor_bytes(program, ins.out))
        for reg in Region:
            peak[reg] = max(peak[reg], live[reg])
            if live[reg] > memory.capacity(reg):
                diags.append(Diagnostic(i, "capacity", f"{reg.name} holds {live[reg]} live bytes, "
                                                       f"capacity {memory.capacity(reg)}"))
        # free whatever was referenced for the last time here
        for name in set(_reads(ins) + _writes(ins)):
            if last_use.get(name) == i and name not in keep and name in where:
                region, size = where.pop(name)
                live[region] -= size
    return diags, {r.name.lower(): peak[r] for r in Region}


def validate_program(program: Program, memory: MemoryConfig = MemoryConfig()) -> list[Diagnostic]:
    """Def-before-use, region rules, dims and per-region live bytes; never raises."""
    return _analyze(program, memory)[0]


def peak_bytes(program: Program, memory: MemoryConfig = MemoryConfig()) -> dict:
    """Maximum simultaneously live bytes per region over the stream."""
    return _analyze(program, memory)[1]


# -- serialization -------------------------------------------------------------
# Binary layout: "STAI", u32 version, u32 n, m, q, then the tensor table
# (u32 count; per tensor u32 name length, utf-8 name, u32 rows, cols, is_weight),
# u32 input count + tensor indices, the same for outputs, u32 instruction count,
# then one record per instruction: tag u8 followed by little-endian u32 fields.

STREAM_MAGIC = b"STAI"
STREAM_VERSION = 1
TAG_LOAD, TAG_STORE, TAG_MATMUL, TAG_VECTOR = 1, 2, 3, 4
_MODE_CODES = {Mode.SPARSE_DENSE: 0, Mode.DENSE_DENSE: 1}


def instruction_dict(ins) -> dict:
    if isinstance(ins, (Load, Store)):
        return {"op": type(ins).__name__.lower(), "region": Region(ins.region).name.lower(),
                "bytes": ins.bytes, "id": ins.id}
    if isinstance(ins, MatMul):
        return {"op": "matmul", "mode": ins.mode.value, "dims": [ins.j, ins.k, ins.l], "heads": ins.heads,
                "a": ins.a, "b": ins.b, "out": ins.out, "transpose_b": ins.transpose_b,
                "a_stacked": ins.a_stacked, "out_stacked": ins.out_stacked}
    return {"op": "vector", "kind": ins.op.name.lower(), "length": ins.length, "rows": ins.rows,
            "operands": list(ins.operands), "out": ins.out, "flags": ins.flags, "param": ins.param}


def write_jsonl(program: Program, sink) -> None:
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "w") as fh:
            return write_jsonl(program, fh)
    for ins in program:
        sink.write(json.dumps(instruction_dict(ins)) + "\n")


def _u32(*vals) -> bytes:
    return struct.pack(f"<{len(vals)}I", *vals)


def to_binary(program: Program) -> bytes:
    names = list(program.tensors)
    index = {name: i for i, name in enumerate(names)}
    out = [STREAM_MAGIC, _u32(STREAM_VERSION, program.nm.n, program.nm.m, program.nm.q, len(names))]
    for name in names:
        raw = name.encode()
        info = program.tensors[name]
        out += [_u32(len(raw)), raw, _u32(info.shape[0], info.shape[1], int(info.weight))]
    for group in (program.inputs, program.outputs):
        out.append(_u32(len(group), *(index[n] for n in group)))
    out.append(_u32(len(program.blocks)))
    for name, kind, start, end in program.blocks:
        raw = name.encode()
        out += [_u32(len(raw)), raw, _u32(0 if kind == "mha" else 1, start, end)]
    out.append(_u32(len(program.instructions)))
    for ins in program:
        if isinstance(ins, (Load, Store)):
            tag = TAG_LOAD if isinstance(ins, Load) else TAG_STORE
            out += [bytes([tag]), _u32(int(ins.region), ins.bytes, index[ins.id])]
        elif isinstance(ins, MatMul):
            flags = ins.transpose_b | ins.a_stacked << 1 | ins.out_stacked << 2
            out += [bytes([TAG_MATMUL]), _u32(_MODE_CODES[ins.mode], ins.j, ins.k, ins.l, ins.heads,
                                              index[ins.a], index[ins.b], index[ins.out], flags)]
        else:
            out += [bytes([TAG_VECTOR]), _u32(int(ins.op), ins.length, ins.rows, len(ins.operands),
                                              *(index[o] for o in ins.operands), index[ins.out],
                                              ins.flags, ins.param)]
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CorruptStream("instruction stream truncated")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def name(self) -> str:
        return self.take(self.u32()).decode()


def from_binary(data: bytes) -> Program:
    rd = _Reader(data)
    if rd.take(4) != STREAM_MAGIC:
        raise CorruptStream("not an STA instruction stream")
    version, n, m, q, count = rd.u32(5)
    if version != STREAM_VERSION:
        raise CorruptStream(f"unsupported stream version {version}")
    names, tensors = [], {}
    for _ in range(count):
        name = rd.name()
        rows, cols, weight = rd.u32(3)
        names.append(name)
        tensors[name] = TensorInfo((rows, cols), bool(weight))

    def ref(i):
        if i >= len(names):
            raise CorruptStream(f"tensor index {i} out of range")
        return names[i]

    inputs = [ref(rd.u32()) for _ in range(rd.u32())]
    outputs = [ref(rd.u32()) for _ in range(rd.u32())]
    blocks = []
    for _ in range(rd.u32()):
        name = rd.name()
        kind, start, end = rd.u32(3)
        blocks.append((name, "mha" if kind == 0 else "ffn", start, end))
    modes = {v: k for k, v in _MODE_CODES.items()}
    ins = []
    for _ in range(rd.u32()):
        tag = rd.take(1)[0]
        if tag in (TAG_LOAD, TAG_STORE):
            region, size, ident = rd.u32(3)
            ins.append((Load if tag == TAG_LOAD else Store)(Region(region), size, ref(ident)))
        elif tag == TAG_MATMUL:
            mode, j, k, l, heads, a, b, o, flags = rd.u32(9)
            ins.append(MatMul(modes[mode], j, k, l, heads, ref(a), ref(b), ref(o),
                              bool(flags & 1), bool(flags & 2), bool(flags & 4)))
        elif tag == TAG_VECTOR:
            op, length, rows, nops = rd.u32(4)
            ops = tuple(ref(rd.u32()) for _ in range(nops))
            o, flags, param = rd.u32(3)
            ins.append(FusedVector(FusedOp(op), length, rows, ops, ref(o), flags, param))
        else:
            raise CorruptStream(f"unknown instruction tag {tag}")
    if rd.pos != len(data):
        raise CorruptStream("trailing bytes after instruction stream")
    return Program(ins, tensors, inputs, outputs, NmConfig(n, m, q), blocks)
