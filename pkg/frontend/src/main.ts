import { ApiClient } from './api.js';
import { ExplorerApp } from './app.js';

const baseUrl = new URLSearchParams(location.search).get('api') ?? 'http://127.0.0.1:8000';

const mount = document.getElementById('app');
if (mount) {
  const app = new ExplorerApp(new ApiClient(baseUrl), mount);
  app.boot().catch((error) => {
    mount.textContent = `service unreachable at ${baseUrl}: ${String(error)}`;
  });
}
