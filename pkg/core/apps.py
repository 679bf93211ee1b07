from django.apps import AppConfig
from django.conf import settings


class CoreConfig(AppConfig):
    """
    Configuração para a aplicação 'core'.
    """
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'core'

    def ready(self):
        """
        Chamado pelo Django quando a aplicação está pronta.

        Liga a verificação de NaN/Inf do motor de tensores conforme
        `ISPLIT['DEBUG_NUMERICS']`.
        """
        from core.tensor import set_debug_numerics

        set_debug_numerics(settings.ISPLIT['DEBUG_NUMERICS'])
