import { App } from "./panels.js";

const root = document.getElementById("app");
if (root) {
  void new App(root).start();
}
