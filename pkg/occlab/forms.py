import copy
import json
from pathlib import Path

from django import forms
from django.conf import settings
from django.core.exceptions import ValidationError

from .datasets import STYLES
from .estimators import ESTIMATORS, LOSS_FAMILIES, NEGATIVES_SCHEMES, WEIGHT_SCHEMES, EstimatorConfig
from .exceptions import ConfigError
from .gcrl import CRITICS
from .interpolation import DEFAULT_ALPHAS
from .mdp import GridworldSpec, load_gridworld_spec


def _choices(values):
    return [(value, value) for value in values]


def _pair_list(value, message):
    pairs = value or []
    if not isinstance(pairs, list):
        raise forms.ValidationError(message)
    for pair in pairs:
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(v, int) for v in pair)):
            raise forms.ValidationError(message)
    return [list(pair) for pair in pairs]


class SectionForm(forms.Form):
    """
    Form over one JSON object of the experiment config.

    Unknown keys are rejected with their dotted path; missing keys take the
    field's initial value before binding.
    """
    section = ''

    def __init__(self, data=None, **kwargs):
        data = {} if data is None else data
        if not isinstance(data, dict):
            raise ConfigError('Expected a JSON object.', key=self.section or None)
        unknown = sorted(set(data) - set(self.base_fields))
        if unknown:
            raise ConfigError(f'Unknown key {unknown[0]!r}.', key=self.dotted(unknown[0]))
        merged = {name: field.initial for name, field in self.base_fields.items()}
        merged.update(data)
        super().__init__(merged, **kwargs)

    def dotted(self, name):
        return f'{self.section}.{name}' if self.section else name

    def resolved(self):
        if not self.is_valid():
            name, errors = next(iter(self.errors.items()))
            key = self.section or None if name == '__all__' else self.dotted(name)
            raise ConfigError(str(errors[0]), key=key)
        return dict(self.cleaned_data)


class LabConfigForm(SectionForm):
    experiment = forms.CharField(initial='occupancy_benchmark', max_length=100)
    gamma = forms.FloatField(initial=0.9)
    seeds = forms.JSONField(initial=[0, 1, 2])
    methods = forms.JSONField(initial=sorted(ESTIMATORS))
    estimator_overrides = forms.JSONField(
        required=False, initial={'c_learning': {'batch_size': 256, 'learning_rate': 0.25}}
    )

    def clean_gamma(self):
        gamma = self.cleaned_data['gamma']
        if not 0.0 < gamma < 1.0:
            raise forms.ValidationError('gamma must lie strictly inside (0, 1).')
        return gamma

    def clean_seeds(self):
        seeds = self.cleaned_data['seeds']
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise forms.ValidationError('seeds must be a non-empty list of non-negative integers.')
        if len(set(seeds)) != len(seeds):
            raise forms.ValidationError('seeds must be distinct.')
        return seeds

    def clean_methods(self):
        methods = self.cleaned_data['methods']
        if not isinstance(methods, list) or not methods:
            raise forms.ValidationError('methods must be a non-empty list.')
        for method in methods:
            if method not in ESTIMATORS:
                raise forms.ValidationError(f'Unknown method {method!r}; expected one of {sorted(ESTIMATORS)}.')
        return methods

    def clean_estimator_overrides(self):
        overrides = self.cleaned_data['estimator_overrides'] or {}
        if not isinstance(overrides, dict):
            raise forms.ValidationError('estimator_overrides must map method names to estimator settings.')
        return copy.deepcopy(overrides)


class MdpForm(SectionForm):
    section = 'mdp'

    kind = forms.ChoiceField(choices=_choices(('gridworld', 'cycle', 'random')), initial='gridworld')
    width = forms.IntegerField(min_value=1, initial=5)
    height = forms.IntegerField(min_value=1, initial=5)
    walls = forms.JSONField(required=False, initial=[])
    slip_prob = forms.FloatField(required=False, min_value=0.0, initial=0.0)
    start = forms.JSONField(required=False, initial=None)
    goal = forms.JSONField(required=False, initial=None)
    num_states = forms.IntegerField(min_value=1, initial=2)
    num_actions = forms.IntegerField(min_value=1, initial=2)
    seed = forms.IntegerField(min_value=0, initial=0)
    layout = forms.CharField(required=False, initial='')

    def clean_slip_prob(self):
        slip = self.cleaned_data['slip_prob'] or 0.0
        if slip >= 1.0:
            raise forms.ValidationError('slip_prob must lie in [0, 1).')
        return slip

    def clean_walls(self):
        return _pair_list(self.cleaned_data['walls'], 'walls must be a list of [row, col] cells.')

    def clean_layout(self):
        layout = self.cleaned_data['layout']
        if not layout:
            return ''
        path = resolve_config_path(layout)
        if not path.is_file():
            raise forms.ValidationError(f'Layout file {path} does not exist.')
        return str(path.resolve())

    def clean(self):
        cleaned_data = super().clean()
        if self.errors:
            return cleaned_data
        if cleaned_data['kind'] == 'gridworld' and cleaned_data['layout']:
            try:
                load_gridworld_spec(cleaned_data['layout'])
            except (ValidationError, KeyError, TypeError, ValueError) as exc:
                self.add_error('layout', f'Bad gridworld layout: {getattr(exc, "message", exc)}')
        elif cleaned_data['kind'] == 'gridworld':
            try:
                GridworldSpec.from_dict(cleaned_data)
            except (ValidationError, TypeError, ValueError) as exc:
                raise forms.ValidationError(getattr(exc, 'message', str(exc)))
        elif cleaned_data['kind'] == 'cycle':
            start = cleaned_data.get('start') or 0
            if not isinstance(start, int) or not 0 <= start < cleaned_data['num_states']:
                raise forms.ValidationError('Cycle start must be a state index.')
        return cleaned_data


class EstimatorForm(SectionForm):
    section = 'estimator'

    loss_family = forms.ChoiceField(choices=_choices(LOSS_FAMILIES), initial='categorical')
    weight_scheme = forms.ChoiceField(choices=_choices(WEIGHT_SCHEMES), initial='softmax_normalized')
    negatives_scheme = forms.ChoiceField(choices=_choices(NEGATIVES_SCHEMES), initial='n_squared')
    batch_size = forms.IntegerField(min_value=2, initial=64)
    repr_dim = forms.IntegerField(required=False, min_value=1, initial=None)
    learning_rate = forms.FloatField(initial=0.5)
    ema_tau = forms.FloatField(initial=0.05)
    normalized = forms.BooleanField(required=False, initial=False)
    scale = forms.FloatField(initial=10.0)
    sr_step_size = forms.FloatField(min_value=0.0, max_value=1.0, initial=0.05)

    def clean_learning_rate(self):
        lr = self.cleaned_data['learning_rate']
        if lr <= 0:
            raise forms.ValidationError('learning_rate must be positive.')
        return lr

    def clean_ema_tau(self):
        tau = self.cleaned_data['ema_tau']
        if not 0.0 < tau <= 1.0:
            raise forms.ValidationError('ema_tau must lie in (0, 1].')
        return tau

    def clean_scale(self):
        scale = self.cleaned_data['scale']
        if scale <= 0:
            raise forms.ValidationError('scale must be positive.')
        return scale

    def clean(self):
        cleaned_data = super().clean()
        if not self.errors:
            try:
                EstimatorConfig(**cleaned_data)
            except ValidationError as exc:
                raise forms.ValidationError(exc.messages[0])
        return cleaned_data


class DatasetForm(SectionForm):
    section = 'dataset'

    size = forms.IntegerField(min_value=1, initial=100_000)
    sizes = forms.JSONField(required=False, initial=[1_000, 10_000, 100_000])
    episode_len = forms.IntegerField(min_value=1, initial=100)
    style = forms.ChoiceField(choices=_choices(STYLES), initial='z_paths')
    p_short = forms.FloatField(min_value=0.0, max_value=1.0, initial=0.05)

    def clean_sizes(self):
        sizes = self.cleaned_data['sizes'] or []
        if not isinstance(sizes, list) or not all(isinstance(s, int) and s >= 1 for s in sizes):
            raise forms.ValidationError('sizes must be a list of positive integers.')
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise forms.ValidationError('Dataset sizes must be strictly increasing.')
        return sizes


class TrainingForm(SectionForm):
    section = 'training'

    steps = forms.IntegerField(min_value=0, initial=50_000)
    eval_interval = forms.IntegerField(min_value=1, initial=1_000)


class GcrlForm(SectionForm):
    section = 'gcrl'

    critic = forms.ChoiceField(choices=_choices(CRITICS), initial='td_infonce')
    iterations = forms.IntegerField(min_value=0, initial=50_000)
    actor_learning_rate = forms.FloatField(initial=0.5)
    eval_interval = forms.IntegerField(min_value=1, initial=1_000)
    eval_episodes = forms.IntegerField(min_value=1, initial=10)
    horizon = forms.IntegerField(required=False, min_value=1, initial=None)
    online = forms.BooleanField(required=False, initial=False)
    collect_interval = forms.IntegerField(min_value=1, initial=100)
    collect_episodes = forms.IntegerField(min_value=1, initial=10)
    episode_len = forms.IntegerField(min_value=1, initial=100)
    explore_eps = forms.FloatField(min_value=0.0, max_value=1.0, initial=0.2)
    pairs = forms.JSONField(required=False, initial=[])

    def clean_actor_learning_rate(self):
        lr = self.cleaned_data['actor_learning_rate']
        if lr <= 0:
            raise forms.ValidationError('actor_learning_rate must be positive.')
        return lr

    def clean_pairs(self):
        return _pair_list(self.cleaned_data['pairs'], 'pairs must be a list of [start, goal] states.')


class InterpolationForm(SectionForm):
    section = 'interpolation'

    alphas = forms.JSONField(required=False, initial=list(DEFAULT_ALPHAS))
    pairs = forms.JSONField(required=False, initial=[])
    num_anchors = forms.IntegerField(required=False, min_value=1, initial=None)

    def clean_alphas(self):
        alphas = self.cleaned_data['alphas'] or list(DEFAULT_ALPHAS)
        if not isinstance(alphas, list) or not all(isinstance(a, (int, float)) and 0 <= a <= 1 for a in alphas):
            raise forms.ValidationError('alphas must be a list of numbers in [0, 1].')
        return [float(a) for a in alphas]

    def clean_pairs(self):
        return _pair_list(self.cleaned_data['pairs'], 'pairs must be a list of [start, goal] states.')


SECTION_FORMS = {
    'mdp': MdpForm,
    'estimator': EstimatorForm,
    'dataset': DatasetForm,
    'training': TrainingForm,
    'gcrl': GcrlForm,
    'interpolation': InterpolationForm,
}


def _resolve_estimator_overrides(estimator, overrides):
    """Each method's settings are the estimator section with its overrides applied on top."""
    for method, changes in overrides.items():
        key = f'estimator_overrides.{method}'
        if method not in ESTIMATORS:
            raise ConfigError(f'Unknown method {method!r}; expected one of {sorted(ESTIMATORS)}.', key=key)
        try:
            EstimatorForm({**estimator, **changes} if isinstance(changes, dict) else changes).resolved()
        except ConfigError as exc:
            suffix = (exc.key or 'estimator').removeprefix('estimator')
            raise ConfigError(str(exc), key=key + suffix) from exc
    return overrides


def validate_config(document):
    """Resolved configuration: every key present, every value validated."""
    if not isinstance(document, dict):
        raise ConfigError('Configuration must be a JSON object.')
    top_level = {key: value for key, value in document.items() if key not in SECTION_FORMS}
    resolved = LabConfigForm(top_level).resolved()
    for name, form_class in SECTION_FORMS.items():
        resolved[name] = form_class(document.get(name)).resolved()
    resolved['estimator_overrides'] = _resolve_estimator_overrides(
        resolved['estimator'], resolved['estimator_overrides']
    )
    return resolved


def parse_override(text):
    key, sep, raw = text.partition('=')
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f'Override {text!r} is not of the form key=value.', key=key or None)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(document, overrides):
    document = copy.deepcopy(document)
    for text in overrides:
        key, value = parse_override(text)
        *parents, leaf = key.split('.')
        if len(parents) > 1 or (parents and parents[0] not in SECTION_FORMS):
            raise ConfigError(f'Unknown key {key!r}.', key=key)
        node = document
        if parents:
            node = document.setdefault(parents[0], {})
            if not isinstance(node, dict):
                raise ConfigError('Expected a JSON object.', key=parents[0])
        elif leaf in SECTION_FORMS:
            raise ConfigError(f'{leaf!r} is a section; override one of its keys instead.', key=key)
        node[leaf] = value
    return document


def resolve_config_path(path):
    path = Path(path)
    if not path.exists() and not path.is_absolute():
        shipped = Path(settings.OCCLAB_CONFIG_DIR) / path
        if shipped.exists():
            return shipped
    return path


def load_config(path, overrides=()):
    path = resolve_config_path(path)
    try:
        document = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f'Config file {path} does not exist.', key='config')
    except json.JSONDecodeError as exc:
        raise ConfigError(f'Config file {path} is not valid JSON: {exc}', key='config')
    return validate_config(apply_overrides(document, overrides))
