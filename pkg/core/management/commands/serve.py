from core.management.base import ISplitCommand
from core.runtime import serve_tail


class Command(ISplitCommand):
    """
    Servidor da cauda (decoder + camadas finais) para inferência dividida.

    Como usar: python manage.py serve --bind 127.0.0.1:9400 --tail runs/x/splits/layer_05/tail.ispl
    """
    help = 'Serve a cauda de um modelo dividido através do protocolo ISWF.'

    def add_command_arguments(self, parser):
        parser.add_argument('--bind', required=True, help='host:porta')
        parser.add_argument('--tail', required=True, help='Checkpoint da cauda (tail.ispl).')
        parser.add_argument('--max-conn', type=int, default=None, help='Ligações simultâneas.')

    def run(self, **options):
        server = serve_tail(options['bind'], options['tail'], options['max_conn'], start=False)
        self.stdout.write(self.style.SUCCESS(
            f"À escuta em {server.address} (máx. {server.max_connections} ligações). Ctrl+C para parar."
        ))
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            self.stdout.write('A terminar...')
        finally:
            server.server_close()
