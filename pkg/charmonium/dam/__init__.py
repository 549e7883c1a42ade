from . import active, adl, datagen, dfs, diffcore, harness, models, vilsurrogate
from .active import QueryResult as QueryResult
from .active import query as query
from .adl import AdlConfig as AdlConfig
from .adl import adapt as adapt
from .adl import fine_tune_active as fine_tune_active
from .config import Config as Config
from .config import load_config as load_config
from .datagen import DomainDataset as DomainDataset
from .datagen import ShiftSpec as ShiftSpec
from .datagen import generate_domain_pair as generate_domain_pair
from .dfs import DfsConfig as DfsConfig
from .dfs import tune_prompts as tune_prompts
from .errors import DamError as DamError
from .fingerprint import fingerprint as fingerprint
from .harness import ExperimentConfig as ExperimentConfig
from .harness import RunRecord as RunRecord
from .harness import run_experiment as run_experiment
from .models import ClassifierModel as ClassifierModel
from .models import TrainConfig as TrainConfig
from .models import train_source as train_source
from .summarize_diff import summarize_diffs as summarize_diffs
from .vilsurrogate import PromptBank as PromptBank
from .vilsurrogate import ViLSurrogate as ViLSurrogate
from .vilsurrogate import surrogate_disabled as surrogate_disabled

__version__ = "0.1.0"
