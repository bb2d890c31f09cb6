from flask import Flask, request, jsonify, Response
from werkzeug.utils import secure_filename
from functools import wraps
from pathlib import Path

import commands
import data_io
from errors import ConfigError, DataError, SpectroscopyError

app = Flask(__name__)

# Upload configuration
ALLOWED_EXTENSIONS = {'csv', 'txt'}
MAX_FILE_SIZE = 16 * 1024 * 1024  # 16MB
app.config['MAX_CONTENT_LENGTH'] = MAX_FILE_SIZE


def allowed_file(filename):
    """Check if file extension is allowed"""
    return '.' in filename and \
           filename.rsplit('.', 1)[1].lower() in ALLOWED_EXTENSIONS


def json_errors(f):
    """Decorator turning package errors into JSON error responses"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except SpectroscopyError as e:
            app.logger.warning("%s failed: %s", request.path, e)
            return jsonify({'success': False, 'error': str(e)}), e.http_status
        except Exception as e:
            app.logger.exception("%s failed", request.path)
            return jsonify({'success': False, 'error': str(e)}), 500
    return decorated_function


def request_config():
    """Run document from the JSON body; referenced documents must be inline"""
    document = request.get_json(silent=True)
    if not isinstance(document, dict):
        raise ConfigError('request body must be a JSON run document')
    seed = request.args.get('seed', type=int)
    threads = request.args.get('threads', type=int)
    return data_io.build_run_config(document, Path('.'), seed=seed, threads=threads, allow_paths=False)


def command_response(result):
    if request.args.get('format') == 'csv' and result.report is None:
        return Response(
            result.to_text(),
            mimetype='text/csv',
            headers={'Content-Disposition': f'attachment; filename={result.name}.csv'}
        )
    return jsonify({'success': True, **result.as_dict()})


@app.route('/api/<command>', methods=['POST'])
@json_errors
def api_command(command):
    if command not in commands.COMMANDS:
        return jsonify({'success': False, 'error': f'Unknown command: {command}'}), 404
    result = commands.run_command(command, request_config())
    return command_response(result)


@app.route('/api/ingest', methods=['POST'])
@json_errors
def api_ingest():
    """Reduce an uploaded sweep CSV to its peak frequency, peak value and Q"""
    if 'file' not in request.files:
        raise DataError('No file provided')
    upload = request.files['file']
    if upload.filename == '':
        raise DataError('No file selected')
    filename = secure_filename(upload.filename)
    if not allowed_file(filename):
        raise DataError('Invalid file type. Only CSV and TXT files are allowed')
    try:
        text = upload.read().decode('utf-8')
    except UnicodeDecodeError:
        raise DataError(f'{filename} is not UTF-8 text')
    return command_response(commands.cmd_ingest(text, filename))


@app.route('/api/health')
def api_health():
    return jsonify({'success': True, 'commands': list(commands.COMMANDS) + ['ingest']})


if __name__ == '__main__':
    app.run(host='127.0.0.1', port=5000, debug=False)
