"""
Django settings for the bayesreg project.

The project hosts the `registration` app: a Bayesian diffeomorphic image
registration engine driven through management commands. The admin site
exposes the training-run registry.

For more information on this file, see
https://docs.djangoproject.com/en/5.1/topics/settings/
"""
import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Quick-start development settings - unsuitable for production
# See https://docs.djangoproject.com/en/5.1/howto/deployment/checklist/

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get(
    'DJANGO_SECRET_KEY',
    'django-insecure-3v9#r!k1q@7m0x$e2w5t8y4u6i^o(p)a-s_d+f=g*h&j%l',
)

# SECURITY WARNING: don't run with debug turned on in production!
DEBUG = os.environ.get('DJANGO_DEBUG', '1') == '1'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',
    'rest_framework',
    'registration',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'bayesreg.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.debug',
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]

WSGI_APPLICATION = 'bayesreg.wsgi.application'


# Database
# https://docs.djangoproject.com/en/5.1/ref/settings/#databases

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
        'OPTIONS': {
            'timeout': 20,
        },
    }
}


# Password validation
# https://docs.djangoproject.com/en/5.1/ref/settings/#auth-password-validators

AUTH_PASSWORD_VALIDATORS = [
    {
        'NAME': 'django.contrib.auth.password_validation.UserAttributeSimilarityValidator',
    },
    {
        'NAME': 'django.contrib.auth.password_validation.MinimumLengthValidator',
    },
]


# Internationalization
# https://docs.djangoproject.com/en/5.1/topics/i18n/

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True


# Static files (CSS, JavaScript, Images)
# https://docs.djangoproject.com/en/5.1/howto/static-files/

STATIC_URL = 'static/'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging
# https://docs.djangoproject.com/en/5.1/topics/logging/

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'registration': {
            'handlers': ['console'],
            'level': os.environ.get('REGISTRATION_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}


# Registration engine defaults. Values marked "published" are the ones used
# for the full-scale 3D brain-MRI experiments; the rest are desk-scale choices.
# RunConfig files override any of these per run.

REGISTRATION = {
    'BACKBONE': {
        'SPATIAL_DIMS': 2,
        'ENCODER_CHANNELS': [16, 32, 32, 32, 32],
        'DECODER_CHANNELS': [32, 32, 32, 16],
        'LEAKY_SLOPE': 0.2,
        'KERNEL_SIZE': 3,
        'FLOW_INIT_STD': 1e-5,
    },
    'LOSS': {
        'LCC_WINDOW': 9,
        'LAMBDA_SMOOTH': 0.1,  # published
        'WEIGHT_DECAY': 1e-7,  # published
        'EPSILON_VAR': 1e-5,
        'REGULARIZE': 'velocity',
    },
    'NOISE': {
        'KIND': 'fixed',
        'STD_DIVISOR': 50.0,  # published: std = lr / 50
        'GAMMA': 0.55,  # published: lr / (1 + t) ** 0.55
        'OFFSET_B': 1.0,
        'FORM': 'std',
    },
    'OPTIMIZER': {
        'LEARNING_RATE': 1e-3,
        'PUBLISHED_LEARNING_RATE': 2.0 ** -4,
        'BETA1': 0.9,
        'BETA2': 0.999,
        'EPS': 1e-8,
    },
    'INTEGRATION_STEPS': 6,  # published
    'TRAINING': {
        'ITERATIONS': 4000,  # published
        'SNAPSHOTS': 8,  # published: burn-in = iterations - snapshots
        'BATCH_SIZE': 1,
        'VAL_EVERY': 50,
        'VAL_PAIRS': 10,
        'PRECISION': 32,
    },
    'POSTERIOR': {
        'WEIGHTING': 'negative_loss',
        'WEIGHT_FLOOR': 1e-8,
        'UNCERTAINTY_FLOOR': 1e-12,
        'ENTROPY_CORRECT': False,
    },
    'SCHEDULE_ENVELOPE_MAX_SPREAD': 100.0,
    'SPLIT_RATIOS': (0.56, 0.30, 0.14),  # published
    'MAX_PAIR_ATTEMPTS': 10,
}
