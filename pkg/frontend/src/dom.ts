// Tiny DOM builders.  Text always goes through textContent, so
// student-supplied strings (names, reasons) can never run as markup.

export function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className = "",
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text) node.textContent = text;
  return node;
}

export function row(
  cells: (string | Node)[],
  cellTag: "td" | "th" = "td",
): HTMLTableRowElement {
  const tr = document.createElement("tr");
  for (const cell of cells) {
    const box = document.createElement(cellTag);
    if (typeof cell === "string") {
      box.textContent = cell;
    } else {
      box.appendChild(cell);
    }
    tr.appendChild(box);
  }
  return tr;
}

export function clear(node: HTMLElement): void {
  while (node.firstChild) {
    node.removeChild(node.firstChild);
  }
}
