"""
Modelo de dados do mapa vetorial e das trilhas, leitura/escrita do formato
de intercâmbio de cenários, geração sintética de cenários e montagem de
amostras (S, M, alvo).
"""

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DT = 0.5                      # 2 Hz
SCENARIO_VERSION = 1
STATE_FEATURES = ("vx", "vy", "ax", "ay", "yaw")


class ScenarioFormatError(ValueError):
    """Arquivo de cenário fora do formato (mensagem inclui a localização)"""


class SemanticLayerType(IntEnum):
    """Ordem fixa dos canais: 4 camadas do mapa + 1 camada do agente"""

    DRIVABLE_AREA = 0
    ROAD_SEGMENT = 1
    LANE = 2
    WALKWAY = 3
    AGENT_BOX = 4

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def from_key(cls, key: str) -> "SemanticLayerType":
        return cls[key.upper()]


MAP_LAYERS = tuple(t for t in SemanticLayerType if t is not SemanticLayerType.AGENT_BOX)


@dataclass(frozen=True)
class VectorMap:
    """Polígonos simples por camada, vértices em metros do mundo"""

    layers: Dict[SemanticLayerType, Tuple[np.ndarray, ...]] = field(default_factory=dict)

    def polygons(self, layer: SemanticLayerType) -> Tuple[np.ndarray, ...]:
        return self.layers.get(layer, ())

    def bounds(self) -> Optional[Tuple[float, float, float, float]]:
        """(xmin, ymin, xmax, ymax) sobre todos os polígonos, ou None se vazio"""
        vertices = [poly for layer in MAP_LAYERS for poly in self.polygons(layer)]
        if not vertices:
            return None
        stacked = np.concatenate(vertices)
        xmin, ymin = stacked.min(axis=0)
        xmax, ymax = stacked.max(axis=0)
        return float(xmin), float(ymin), float(xmax), float(ymax)

    def fingerprint(self) -> str:
        """Hash do conteúdo (camadas e vértices); identifica o mapa nas chaves de cache"""
        digest = hashlib.blake2b(digest_size=16)
        for layer in MAP_LAYERS:
            polygons = self.polygons(layer)
            digest.update(f"{int(layer)}:{len(polygons)};".encode())
            for poly in polygons:
                poly = np.ascontiguousarray(poly, dtype=np.float64)
                digest.update(f"{poly.shape[0]};".encode())
                digest.update(poly.tobytes())
        return digest.hexdigest()

    def translated(self, dx: float, dy: float) -> "VectorMap":
        offset = np.array([dx, dy])
        return VectorMap({layer: tuple(p + offset for p in polys) for layer, polys in self.layers.items()})


@dataclass(frozen=True)
class AgentState:
    t: float
    x: float
    y: float
    vx: float
    vy: float
    ax: float
    ay: float
    yaw: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    @property
    def acceleration(self) -> np.ndarray:
        return np.array([self.ax, self.ay])

    def features(self) -> np.ndarray:
        """Vetor de estado (vx, vy, ax, ay, yaw)"""
        return np.array([self.vx, self.vy, self.ax, self.ay, self.yaw])


@dataclass(frozen=True)
class Track:
    agent_id: str
    states: Tuple[AgentState, ...]
    length_m: float
    width_m: float

    def __post_init__(self):
        times = [s.t for s in self.states]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ScenarioFormatError(f"trilha {self.agent_id}: timestamps não estritamente crescentes")

    def __len__(self):
        return len(self.states)

    def positions(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s in self.states]).reshape(-1, 2)

    def translated(self, dx: float, dy: float) -> "Track":
        states = tuple(AgentState(s.t, s.x + dx, s.y + dy, s.vx, s.vy, s.ax, s.ay, s.yaw) for s in self.states)
        return Track(self.agent_id, states, self.length_m, self.width_m)


def translate_scenario(vector_map: VectorMap, tracks: Sequence[Track], dx: float, dy: float):
    """Translação conjunta de mapa e trilhas"""
    return vector_map.translated(dx, dy), [t.translated(dx, dy) for t in tracks]


# ----------------------------------------------------------------------
# Formato de intercâmbio
# ----------------------------------------------------------------------

def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioFormatError(f"{where}: número esperado, recebeu {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ScenarioFormatError(f"{where}: valor não finito")
    return value


def _require(doc: dict, key: str, kind, where: str):
    if not isinstance(doc, dict) or key not in doc:
        raise ScenarioFormatError(f"{where}: campo obrigatório '{key}' ausente")
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ScenarioFormatError(f"{where}.{key}: tipo inválido")
    return value


def _parse_polygon(raw, where: str) -> np.ndarray:
    if not isinstance(raw, list):
        raise ScenarioFormatError(f"{where}: lista de vértices esperada")
    if len(raw) < 3:
        raise ScenarioFormatError(f"{where}: polígono com {len(raw)} vértices (mínimo 3)")
    vertices = []
    for k, pair in enumerate(raw):
        if not isinstance(pair, list) or len(pair) != 2:
            raise ScenarioFormatError(f"{where}[{k}]: par [x, y] esperado")
        vertices.append([_number(pair[0], f"{where}[{k}][0]"), _number(pair[1], f"{where}[{k}][1]")])
    return np.array(vertices, dtype=np.float64)


def _parse_track(raw, where: str) -> Track:
    agent_id = _require(raw, "agent_id", str, where)
    length_m = _number(_require(raw, "length_m", (int, float), where), f"{where}.length_m")
    width_m = _number(_require(raw, "width_m", (int, float), where), f"{where}.width_m")
    if length_m <= 0 or width_m <= 0:
        raise ScenarioFormatError(f"{where}: dimensões da caixa devem ser positivas")
    states = []
    for k, s in enumerate(_require(raw, "states", list, where)):
        loc = f"{where}.states[{k}]"
        values = {name: _number(_require(s, name, (int, float), loc), f"{loc}.{name}")
                  for name in ("t", "x", "y", "vx", "vy", "ax", "ay", "yaw")}
        if not -math.pi < values["yaw"] <= math.pi:
            raise ScenarioFormatError(f"{loc}.yaw: fora de (-pi, pi]")
        if states:
            step = values["t"] - states[-1].t
            if step <= 0:
                raise ScenarioFormatError(f"{loc}.t: timestamp não crescente")
            if abs(step - DT) > 1e-6:
                raise ScenarioFormatError(f"{loc}.t: intervalo {step} s (esperado {DT} s)")
        states.append(AgentState(**values))
    return Track(agent_id, tuple(states), length_m, width_m)


def parse_scenario(doc) -> Tuple[VectorMap, List[Track]]:
    """Validar e converter um documento já decodificado"""
    version = _require(doc, "version", int, "$")
    if version != SCENARIO_VERSION:
        raise ScenarioFormatError(f"$.version: versão {version} não suportada")
    layers_raw = _require(_require(doc, "map", dict, "$"), "layers", list, "$.map")
    layers: Dict[SemanticLayerType, List[np.ndarray]] = {}
    for i, entry in enumerate(layers_raw):
        where = f"map.layers[{i}]"
        key = _require(entry, "type", str, where)
        try:
            layer = SemanticLayerType.from_key(key)
        except KeyError:
            layer = None
        if layer is None or layer is SemanticLayerType.AGENT_BOX:
            raise ScenarioFormatError(f"{where}.type: tipo de camada desconhecido '{key}'")
        polygons = _require(entry, "polygons", list, where)
        layers.setdefault(layer, []).extend(
            _parse_polygon(p, f"{where}.polygons[{j}]") for j, p in enumerate(polygons))

    tracks = [_parse_track(t, f"tracks[{i}]") for i, t in enumerate(_require(doc, "tracks", list, "$"))]
    ids = [t.agent_id for t in tracks]
    if len(set(ids)) != len(ids):
        raise ScenarioFormatError("tracks: agent_id duplicado")
    return VectorMap({k: tuple(v) for k, v in layers.items()}), tracks


def load_scenario(path: str) -> Tuple[VectorMap, List[Track]]:
    """Ler um arquivo de cenário (JSON UTF-8, version 1)"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ScenarioFormatError(f"{path}: JSON inválido na linha {e.lineno}, coluna {e.colno}: {e.msg}") from e
    try:
        return parse_scenario(doc)
    except ScenarioFormatError as e:
        raise ScenarioFormatError(f"{path}: {e}") from e


def scenario_to_dict(vector_map: VectorMap, tracks: Sequence[Track]) -> dict:
    """Forma canônica: camadas na ordem de SemanticLayerType, todas presentes"""
    return {
        "version": SCENARIO_VERSION,
        "map": {
            "layers": [
                {"type": layer.key, "polygons": [[[float(x), float(y)] for x, y in p] for p in vector_map.polygons(layer)]}
                for layer in MAP_LAYERS
            ]
        },
        "tracks": [
            {
                "agent_id": t.agent_id,
                "length_m": float(t.length_m),
                "width_m": float(t.width_m),
                "states": [
                    {"t": s.t, "x": s.x, "y": s.y, "vx": s.vx, "vy": s.vy, "ax": s.ax, "ay": s.ay, "yaw": s.yaw}
                    for s in t.states
                ],
            }
            for t in tracks
        ],
    }


def dumps_scenario(vector_map: VectorMap, tracks: Sequence[Track]) -> str:
    return json.dumps(scenario_to_dict(vector_map, tracks), ensure_ascii=False, separators=(",", ":")) + "\n"


def save_scenario(vector_map: VectorMap, tracks: Sequence[Track], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_scenario(vector_map, tracks))


# ----------------------------------------------------------------------
# Geração sintética
# ----------------------------------------------------------------------

SCENARIO_KINDS = ("straight", "curve", "intersection")


class _Path:
    """Caminho parametrizado por comprimento de arco: segmentos retos e arcos"""

    def __init__(self, start, heading: float):
        self.start = np.asarray(start, dtype=np.float64)
        self.heading = heading
        self.segments = []            # (s0, comprimento, origem, rumo, curvatura)
        self.length = 0.0
        self._cursor = self.start.copy()
        self._cursor_heading = heading

    def _append(self, length: float, curvature: float) -> "_Path":
        self.segments.append((self.length, length, self._cursor.copy(), self._cursor_heading, curvature))
        self._cursor = self._advance(self._cursor, self._cursor_heading, curvature, length)
        self._cursor_heading += curvature * length
        self.length += length
        return self

    def line(self, length: float) -> "_Path":
        return self._append(length, 0.0)

    def arc(self, radius: float, angle: float) -> "_Path":
        """angle > 0 vira à esquerda (anti-horário)"""
        return self._append(radius * abs(angle), math.copysign(1.0 / radius, angle))

    @staticmethod
    def _advance(origin, heading, curvature, s):
        if curvature == 0.0:
            return origin + s * np.array([math.cos(heading), math.sin(heading)])
        r = 1.0 / curvature
        return origin + r * np.array([math.sin(heading + curvature * s) - math.sin(heading),
                                      math.cos(heading) - math.cos(heading + curvature * s)])

    def _segment(self, s: float):
        for segment in self.segments:
            if s <= segment[0] + segment[1]:
                return segment
        return self.segments[-1]

    def point(self, s: float) -> np.ndarray:
        s0, _, origin, heading, curvature = self._segment(s)
        return self._advance(origin, heading, curvature, s - s0)

    def heading_at(self, s: float) -> float:
        s0, _, _, heading, curvature = self._segment(s)
        return heading + curvature * (s - s0)

    def offset(self, lateral: float) -> "_Path":
        """Caminho paralelo deslocado lateralmente (positivo = esquerda)"""
        normal = np.array([-math.sin(self.heading), math.cos(self.heading)])
        path = _Path(self.start + lateral * normal, self.heading)
        for _, length, _, _, curvature in self.segments:
            factor = 1.0 - lateral * curvature
            path._append(length * factor, curvature / factor)
        return path

    def reversed(self) -> "_Path":
        path = _Path(self._cursor, self._cursor_heading + math.pi)
        for _, length, _, _, curvature in reversed(self.segments):
            path._append(length, -curvature)
        return path

    def sample(self, spacing: float = 2.0) -> np.ndarray:
        count = max(2, int(math.ceil(self.length / spacing)) + 1)
        return np.array([self.point(s) for s in np.linspace(0.0, self.length, count)])


def _ribbon(centerline: np.ndarray, left: float, right: float) -> np.ndarray:
    """Polígono entre os deslocamentos laterais left e right (positivo = esquerda)"""
    tangent = np.gradient(centerline, axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    return np.concatenate([centerline + left * normal, (centerline + right * normal)[::-1]])


def _wrap_angle(angle):
    """Ângulo em (-pi, pi]"""
    wrapped = math.atan2(math.sin(angle), math.cos(angle))
    return math.pi if wrapped == -math.pi else wrapped


@dataclass
class _Road:
    path: _Path
    lane_width: float
    lanes_right: int
    lanes_left: int
    shoulder: float
    walkway: float

    @property
    def half_width(self) -> float:
        return 0.5 * self.lane_width * (self.lanes_right + self.lanes_left)

    def lane_offsets(self) -> List[float]:
        """Deslocamento lateral do centro de cada faixa (negativo = à direita do sentido do caminho)"""
        n = self.lanes_right + self.lanes_left
        return [-self.half_width + (j + 0.5) * self.lane_width for j in range(n)]

    def lane_path(self, offset: float) -> _Path:
        """Linha central da faixa no sentido de circulação (mão direita)"""
        path = self.path.offset(offset)
        return path.reversed() if offset > 0 else path

    def polygons(self) -> Dict[SemanticLayerType, List[np.ndarray]]:
        center = self.path.sample()
        edge = self.half_width + self.shoulder
        return {
            SemanticLayerType.ROAD_SEGMENT: [_ribbon(center, self.half_width, -self.half_width)],
            SemanticLayerType.DRIVABLE_AREA: [_ribbon(center, edge, -edge)],
            SemanticLayerType.WALKWAY: [_ribbon(center, edge + self.walkway, edge),
                                        _ribbon(center, -edge, -edge - self.walkway)],
            SemanticLayerType.LANE: [_ribbon(center, off + 0.5 * self.lane_width, off - 0.5 * self.lane_width)
                                     for off in self.lane_offsets()],
        }


def _random_road(rng: np.random.Generator, path: _Path) -> _Road:
    return _Road(
        path=path,
        lane_width=float(rng.uniform(3.0, 3.75)),
        lanes_right=int(rng.integers(1, 3)),
        lanes_left=1,
        shoulder=float(rng.uniform(0.5, 1.0)),
        walkway=float(rng.uniform(3.0, 4.0)),
    )


def _speed_profile(rng: np.random.Generator, constant: bool):
    v0 = float(rng.uniform(4.0, 11.0))
    dv = 0.0 if constant else float(rng.uniform(-2.5, 2.5))
    horizon = float(rng.uniform(8.0, 16.0))

    def distance(t: np.ndarray) -> np.ndarray:
        # v(t) = v0 + dv·(1 - cos(pi·t/T))/2
        return v0 * t + 0.5 * dv * (t - (horizon / math.pi) * np.sin(math.pi * t / horizon))
    return distance


def _track_from_distance(agent_id: str, path: _Path, distance_fn, start: float, steps: int,
                         rng: np.random.Generator) -> Track:
    """Posições ao longo do caminho; v, a e yaw por diferenças centrais das posições"""
    times = np.arange(-2, steps + 2) * DT
    positions = np.array([path.point(start + d) for d in distance_fn(times)])
    velocity = (positions[2:] - positions[:-2]) / (2.0 * DT)          # passos -1..steps
    acceleration = (velocity[2:] - velocity[:-2]) / (2.0 * DT)        # passos 0..steps-1
    velocity = velocity[1:-1]
    positions = positions[2:-2]
    states = []
    yaw = _wrap_angle(path.heading_at(start))
    for i in range(steps):
        vx, vy = velocity[i]
        if math.hypot(vx, vy) > 1e-9:
            yaw = _wrap_angle(math.atan2(vy, vx))
        states.append(AgentState(
            t=float(i * DT), x=float(positions[i, 0]), y=float(positions[i, 1]),
            vx=float(vx), vy=float(vy), ax=float(acceleration[i, 0]), ay=float(acceleration[i, 1]),
            yaw=float(yaw),
        ))
    return Track(agent_id, tuple(states), float(rng.uniform(4.0, 5.0)), float(rng.uniform(1.7, 2.1)))


def _rigid(points: np.ndarray, rotation: float, origin: np.ndarray) -> np.ndarray:
    c, s = math.cos(rotation), math.sin(rotation)
    return points @ np.array([[c, s], [-s, c]]) + origin


def _seed_sequence(seed: int, kind: str, n_agents: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, SCENARIO_KINDS.index(kind), int(n_agents)])


def generate_scenario(seed: int, kind: str, n_agents: int,
                      track_steps: int = 24) -> Tuple[VectorMap, List[Track]]:
    """
    Cenário sintético determinístico para (seed, kind, n_agents).

    straight: via reta, velocidade constante; curve: arco de raio 60-90 m;
    intersection: duas vias perpendiculares com trajetos retos e conversões.
    """
    if kind not in SCENARIO_KINDS:
        raise ValueError(f"tipo de cenário desconhecido: {kind}")
    rng = np.random.default_rng(_seed_sequence(seed, kind, n_agents))
    rotation = float(rng.uniform(-math.pi, math.pi))
    origin = rng.uniform(-500.0, 500.0, size=2)

    roads: List[_Road] = []
    routes = []
    if kind == "straight":
        road = _random_road(rng, _Path((-150.0, 0.0), 0.0).line(300.0))
        roads.append(road)
        routes.append(road)
    elif kind == "curve":
        radius = float(rng.uniform(60.0, 90.0))
        road = _random_road(rng, _Path((0.0, -radius), 0.0).arc(radius, 280.0 / radius))
        roads.append(road)
        routes.append(road)
    else:
        road_a = _random_road(rng, _Path((-160.0, 0.0), 0.0).line(320.0))
        road_b = _random_road(rng, _Path((0.0, -160.0), math.pi / 2).line(320.0))
        roads.extend([road_a, road_b])
        routes.extend([road_a, road_b, "turn"])

    layers: Dict[SemanticLayerType, List[np.ndarray]] = {layer: [] for layer in MAP_LAYERS}
    for road in roads:
        for layer, polys in road.polygons().items():
            layers[layer].extend(_rigid(p, rotation, origin) for p in polys)

    tracks = []
    for i in range(n_agents):
        route = routes[int(rng.integers(len(routes)))]
        constant = kind == "straight"
        distance_fn = _speed_profile(rng, constant)
        if isinstance(route, str):
            # conversão à direita: faixa da via A (sentido +x) para a via B (sentido -y, em x = -lane_b)
            lane_a, lane_b = roads[0].lane_offsets()[0], roads[1].lane_offsets()[-1]
            radius = float(rng.uniform(6.0, 10.0))
            path = _Path((-lane_b - radius - 150.0, lane_a), 0.0).line(150.0).arc(radius, -math.pi / 2).line(150.0)
            start = float(rng.uniform(30.0, 110.0))
        else:
            offsets = route.lane_offsets()
            j = int(rng.integers(len(offsets)))
            path = route.lane_path(offsets[j])
            start = float(rng.uniform(20.0, 60.0))
        track = _track_from_distance(f"agent-{i:02d}", path, distance_fn, start, track_steps, rng)
        tracks.append(_rigid_track(track, rotation, origin))

    vector_map = VectorMap({layer: tuple(polys) for layer, polys in layers.items()})
    logger.debug(f"Cenário gerado: seed={seed} kind={kind} agentes={n_agents}")
    return vector_map, tracks


def _rigid_track(track: Track, rotation: float, origin: np.ndarray) -> Track:
    """Aplicar rotação+translação a posições; v e a giram; yaw soma a rotação"""
    c, s = math.cos(rotation), math.sin(rotation)
    states = []
    for st in track.states:
        states.append(AgentState(
            t=st.t,
            x=float(c * st.x - s * st.y + origin[0]), y=float(s * st.x + c * st.y + origin[1]),
            vx=float(c * st.vx - s * st.vy), vy=float(s * st.vx + c * st.vy),
            ax=float(c * st.ax - s * st.ay), ay=float(s * st.ax + c * st.ay),
            yaw=_wrap_angle(st.yaw + rotation),
        ))
    return Track(track.agent_id, tuple(states), track.length_m, track.width_m)


# ----------------------------------------------------------------------
# Padronização e amostras
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, rows: np.ndarray) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.std

    def invert(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"features": list(STATE_FEATURES), "mean": [float(v) for v in self.mean],
                "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: dict) -> "StandardizationStats":
        return cls(np.array(data["mean"], dtype=np.float64), np.array(data["std"], dtype=np.float64))


def compute_stats(rows) -> StandardizationStats:
    """Média e desvio (populacional) por feature; desvio nulo vira 1"""
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, len(STATE_FEATURES))
    if rows.shape[0] < 2:
        raise ValueError("compute_stats requer ao menos 2 linhas")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return StandardizationStats(mean, std)


@dataclass(frozen=True)
class Sample:
    state: np.ndarray             # [rho, 5] padronizado
    raw_state: np.ndarray         # [rho, 5]
    chunk_origins: np.ndarray     # [rho, 2]
    chunks: np.ndarray            # [rho, 5, P, P] em [0, 1]
    target: np.ndarray            # [tau, 2] relativo a p_t
    observed: Tuple[AgentState, ...]
    out_of_map: bool
    scenario_id: str
    agent_id: str
    step: int

    @property
    def last_state(self) -> AgentState:
        return self.observed[-1]


def sample_windows(track: Track, rho: int, tau: int) -> range:
    """Índices do passo atual t de cada janela válida"""
    return range(rho - 1, len(track) - tau)


def window_state_rows(track: Track, rho: int, tau: int) -> np.ndarray:
    """Linhas de estado brutas de todas as janelas observadas (para compute_stats)"""
    rows = [track.states[k].features() for t in sample_windows(track, rho, tau)
            for k in range(t - rho + 1, t + 1)]
    return np.array(rows).reshape(-1, len(STATE_FEATURES))


def _window_inside(bounds, origin: np.ndarray, lambda_m: float) -> bool:
    if bounds is None:
        return False
    xmin, ymin, xmax, ymax = bounds
    return (origin[0] - lambda_m >= xmin and origin[0] + lambda_m <= xmax
            and origin[1] - lambda_m >= ymin and origin[1] + lambda_m <= ymax)


def build_samples(vector_map: VectorMap, track: Track, rho: int, tau: int,
                  stats: StandardizationStats, raster_cfg=None, scenario_id: str = "",
                  cache=None) -> List[Sample]:
    """
    Uma amostra por janela válida (rho observados incluindo t, tau futuros).

    Trilha curta demais devolve lista vazia.
    """
    from modules.rasterizer import RasterConfig, rasterize_chunk_stack

    raster_cfg = raster_cfg or RasterConfig()
    bounds = vector_map.bounds()
    map_id = vector_map.fingerprint() if cache is not None else None
    samples = []
    for t in sample_windows(track, rho, tau):
        observed = track.states[t - rho + 1:t + 1]
        raw = np.array([s.features() for s in observed])
        origin = observed[-1].position
        chunks, origins, inside = [], [], True
        for k in range(t - rho + 1, t + 1):
            state = track.states[k]
            key = (map_id, state.x, state.y, state.yaw, track.length_m, track.width_m, raster_cfg)
            stack = cache.get(key) if cache is not None else None
            if stack is None:
                stack = rasterize_chunk_stack(vector_map, state, track.length_m, track.width_m, raster_cfg)
                if cache is not None:
                    cache.set(key, stack)
            chunks.append(stack.layers)
            origins.append(stack.origin)
            inside = inside and _window_inside(bounds, state.position, raster_cfg.lambda_m)
        future = np.array([track.states[k].position for k in range(t + 1, t + tau + 1)])
        samples.append(Sample(
            state=stats.apply(raw).astype(np.float32),
            raw_state=raw,
            chunk_origins=np.array(origins),
            chunks=np.stack(chunks),
            target=future - origin,
            observed=tuple(observed),
            out_of_map=not inside,
            scenario_id=scenario_id,
            agent_id=track.agent_id,
            step=t,
        ))
    return samples


def build_dataset(scenarios: Iterable[Tuple[str, VectorMap, Sequence[Track]]], rho: int, tau: int,
                  stats: StandardizationStats, raster_cfg=None, threads: int = 1,
                  cache=None) -> List[Sample]:
    """Amostras de vários cenários; paralelo por trilha, ordem de saída determinística"""
    from modules.worker_pool import run_ordered

    jobs = [(sid, vmap, track) for sid, vmap, tracks in scenarios for track in tracks]
    results = run_ordered(
        lambda job: build_samples(job[1], job[2], rho, tau, stats, raster_cfg, job[0], cache),
        jobs, threads)
    return [sample for batch in results for sample in batch]
