"""
Django settings for the isplit project.

O projeto não serve páginas web: o Django é usado para configuração,
linha de comando (management commands), registo de execuções (ORM)
e execução dos testes.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    'ISPLIT_SECRET_KEY',
    'django-insecure-isplit-local-only-7c1f0e2b9a4d'
)

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.environ.get('ISPLIT_DEBUG', '0') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'core',
]

MIDDLEWARE = []


# Database
# https://docs.djangoproject.com/en/5.2/ref/settings/#databases
# Índice local das execuções do pipeline (os artefactos ficam em disco).

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'isplit.sqlite3',
    }
}


# Internationalization
# https://docs.djangoproject.com/en/5.2/topics/i18n/

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True

# Default primary key field type
# https://docs.djangoproject.com/en/5.2/ref/settings/#default-auto-field

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


def _threads_from_env() -> int:
    """Lê ISPLIT_THREADS; sem valor válido usa o número de CPUs."""
    raw = os.environ.get('ISPLIT_THREADS', '')
    try:
        value = int(raw)
    except ValueError:
        value = os.cpu_count() or 1
    return max(1, value)


# Configuração do toolkit de split computing

ISPLIT = {
    # Onde os relatórios do pipeline são escritos por defeito
    'OUTPUT_ROOT': BASE_DIR / 'runs',

    # Paralelismo máximo do estágio CUI (limitado por ISPLIT_THREADS)
    'THREADS': _threads_from_env(),

    # Número fixo de imagens por bloco de Grad-CAM; não depende das threads
    'CUI_CHUNK_SIZE': 16,

    # Verificação de NaN/Inf após cada operação do motor de tensores
    'DEBUG_NUMERICS': os.environ.get('ISPLIT_DEBUG_NUMERICS', '0') == '1',

    # Rede (servidor da cauda / cliente da cabeça)
    'SOCKET_TIMEOUT_S': 5.0,
    'MAX_FRAME_BYTES': 64 * 1024 * 1024,
    'MAX_CONNECTIONS': 8,

    # Canal usado pelo relatório de varrimento (apenas estimativas)
    'CHANNEL': {
        'bandwidth_bytes_per_s': 10_000_000,
        'latency_s': 0.020,
    },

    # Configurações de treino por fase (Adam em todas)
    'TRAINING': {
        'classifier': {
            'phase': 'classifier', 'epochs': 30, 'lr': 5e-3,
            'optimizer': 'adam', 'batch_size': 32,
            'loss': 'cross_entropy', 'seed': 0,
        },
        'ae': {
            'phase': 'ae', 'epochs': 200, 'lr': 5e-3,
            'optimizer': 'adam', 'batch_size': 32,
            'loss': 'mse_recon', 'seed': 0,
        },
        'finetune': {
            'phase': 'finetune', 'epochs': 100, 'lr': 1e-4,
            'optimizer': 'adam', 'batch_size': 32,
            'loss': 'cross_entropy', 'seed': 0,
        },
    },

    # Estatística por reamostragem (15 conjuntos de até 800 imagens)
    'RESAMPLE_TRIALS': 15,
    'RESAMPLE_SIZE': 800,
}


# Configuração dos Loggings

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,  # mantém os loggers padrão do Django
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} [{name}] {pathname}:{lineno:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} [{name}] {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',  # Formato simples para o console
        },
        'file': {
            'class': 'logging.FileHandler',
            # Garante que o ficheiro de log fique na raiz do projeto
            'filename': os.path.join(BASE_DIR, 'isplit.log'),
            'formatter': 'verbose',  # Formato detalhado para o ficheiro
            'delay': True,
        },
    },
    'loggers': {
        'django': {
            'handlers': ['console', 'file'],
            'level': 'INFO',
            'propagate': True,
        },
        # Logger da aplicação 'core' (motor, interpretabilidade, runtime, pipeline)
        'core': {
            'handlers': ['console', 'file'],
            'level': os.environ.get('ISPLIT_LOG_LEVEL', 'INFO'),
            'propagate': False,  # Impede que a mensagem apareça duas vezes
        },
    },
}
